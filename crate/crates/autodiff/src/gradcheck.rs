//! Central finite-difference checks for tape gradients.
//!
//! The error measure is `|analytic - numeric| / max(1, |analytic|, |numeric|)`,
//! i.e. relative for gradients of magnitude above one and absolute below.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares reverse-mode gradients of `build` against central differences
/// with step `h`, perturbing every input scalar. Returns the worst error.
pub fn max_gradient_error<F>(inputs: &[Tensor], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = vals
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(gradient_error(analytic[j], numeric));
        }
    }
    Ok(worst)
}

/// Every primitive exercised by [`random_graph_suite`].
pub const PRIMITIVES: &[&str] = &[
    "matmul", "bmm", "bmm_t", "add", "sub", "mul", "add_row", "mul_row", "scale",
    "add_scalar", "relu", "tanh", "exp", "ln", "square", "abs", "softmax",
    "log_softmax", "layer_norm", "concat", "slice", "reshape", "transpose", "sum",
    "mean", "sum_last", "pick",
];

#[derive(Clone, Debug)]
pub struct GraphCheck {
    pub ops: Vec<&'static str>,
    pub max_error: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], mag: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-mag..mag)).collect()).unwrap()
}

/// One primitive applied to a rank-3 value, plus the extra input it needs.
struct Layer {
    op: &'static str,
    extra: Option<Tensor>,
    aux: usize,
}

fn apply_layer(tape: &mut Tape, x: Var, layer: &Layer, extra: Option<Var>) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, r, c) = (s[0], s[1], s[2]);
    let y = match layer.op {
        "matmul" | "add" | "sub" | "mul" | "add_row" | "mul_row" => {
            let e = extra.unwrap();
            match layer.op {
                "matmul" => tape.matmul(x, e)?,
                "add" => tape.add(x, e)?,
                "sub" => tape.sub(x, e)?,
                "mul" => tape.mul(x, e)?,
                "add_row" => tape.add_row(x, e)?,
                _ => tape.mul_row(x, e)?,
            }
        }
        "bmm" => tape.bmm(x, extra.unwrap(), false)?,
        "bmm_t" => tape.bmm(x, extra.unwrap(), true)?,
        "concat" => tape.concat(&[x, extra.unwrap()], 1 + layer.aux % 2)?,
        "scale" => tape.scale(x, -1.7)?,
        "add_scalar" => tape.add_scalar(x, 0.3)?,
        "relu" => tape.relu(x)?,
        "tanh" => tape.tanh(x)?,
        "exp" => {
            let t = tape.tanh(x)?;
            let t = tape.scale(t, 2.0)?;
            tape.exp(t)?
        }
        "ln" => {
            let sq = tape.square(x)?;
            let p = tape.add_scalar(sq, 0.5)?;
            tape.ln(p)?
        }
        "square" => tape.square(x)?,
        "abs" => tape.abs(x)?,
        "softmax" => tape.softmax(x)?,
        "log_softmax" => tape.log_softmax(x)?,
        "layer_norm" => tape.layer_norm(x, 1e-5)?,
        "slice" => {
            let axis = layer.aux % 3;
            let len = s[axis].max(2) - 1;
            let start = s[axis] - len;
            tape.slice(x, axis, start, len)?
        }
        "reshape" => tape.reshape(x, &[b, c, r])?,
        "transpose" => tape.transpose(x)?,
        "sum" => {
            let t = tape.sum(x)?;
            tape.reshape(t, &[1, 1, 1])?
        }
        "mean" => {
            let t = tape.mean(x)?;
            tape.reshape(t, &[1, 1, 1])?
        }
        "sum_last" => {
            let t = tape.sum_last(x)?;
            tape.reshape(t, &[b, r, 1])?
        }
        "pick" => {
            let index: Vec<usize> = (0..b * r).map(|i| (i * 7 + layer.aux) % c).collect();
            let t = tape.pick(x, &index)?;
            tape.reshape(t, &[b, r, 1])?
        }
        other => unreachable!("unknown primitive {other}"),
    };
    Ok(y)
}

fn make_extra(rng: &mut ChaCha8Rng, op: &str, s: &[usize], aux: usize) -> Option<Tensor> {
    let (b, r, c) = (s[0], s[1], s[2]);
    let k = 1 + aux % 3;
    let shape: Vec<usize> = match op {
        "matmul" => vec![c, k],
        "add" | "sub" | "mul" => s.to_vec(),
        "add_row" | "mul_row" => vec![c],
        "bmm" => vec![b, c, k],
        "bmm_t" => vec![b, k, c],
        "concat" => {
            if aux % 2 == 0 {
                vec![b, k, c]
            } else {
                vec![b, r, k]
            }
        }
        _ => return None,
    };
    Some(rand_tensor(rng, &shape, 10.0))
}

fn shape_after(op: &str, s: &[usize], aux: usize, extra: Option<&Tensor>) -> Vec<usize> {
    let (b, r, c) = (s[0], s[1], s[2]);
    match op {
        "matmul" | "bmm" => vec![b, r, extra.unwrap().shape().last().copied().unwrap()],
        "bmm_t" => vec![b, r, extra.unwrap().shape()[1]],
        "concat" => {
            let e = extra.unwrap().shape();
            if aux % 2 == 0 {
                vec![b, r + e[1], c]
            } else {
                vec![b, r, c + e[2]]
            }
        }
        "slice" => {
            let mut o = s.to_vec();
            let axis = aux % 3;
            o[axis] = s[axis].max(2) - 1;
            o
        }
        "reshape" | "transpose" => vec![b, c, r],
        "sum" | "mean" => vec![1, 1, 1],
        "sum_last" | "pick" => vec![b, r, 1],
        _ => s.to_vec(),
    }
}

/// Builds `n_graphs` random three-layer graphs cycling through every entry of
/// [`PRIMITIVES`] and checks each against central differences.
pub fn random_graph_suite(n_graphs: usize, seed: u64, h: f64) -> Result<Vec<GraphCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<&'static str> = PRIMITIVES.to_vec();
    order.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n_graphs);
    for g in 0..n_graphs {
        let shape0 = vec![rng.gen_range(1..=2), rng.gen_range(2..=3), rng.gen_range(2..=4)];
        let x0 = rand_tensor(&mut rng, &shape0, 10.0);
        let mut layers = Vec::new();
        let mut shape = shape0.clone();
        for l in 0..3 {
            let op = order[(3 * g + l) % order.len()];
            let aux = rng.gen_range(0..6);
            let extra = make_extra(&mut rng, op, &shape, aux);
            shape = shape_after(op, &shape, aux, extra.as_ref());
            layers.push(Layer { op, extra, aux });
        }
        let weights = rand_tensor(&mut rng, &shape, 1.0);

        let mut inputs = vec![x0];
        inputs.extend(layers.iter().filter_map(|l| l.extra.clone()));
        let build = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let mut x = vars[0];
            let mut next = 1;
            for layer in &layers {
                let extra = layer.extra.as_ref().map(|_| {
                    next += 1;
                    vars[next - 1]
                });
                x = apply_layer(tape, x, layer, extra)?;
            }
            let w = tape.constant(weights.clone())?;
            let prod = tape.mul(x, w)?;
            tape.sum(prod)
        };
        let max_error = max_gradient_error(&inputs, h, build)?;
        out.push(GraphCheck {
            ops: layers.iter().map(|l| l.op).collect(),
            max_error,
        });
    }
    Ok(out)
}
