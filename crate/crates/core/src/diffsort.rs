//! Differentiable sorting.
//!
//! The soft relaxation is the unimodal row-stochastic construction: output
//! position `i` (0-based, ascending) scores element `j` with
//! `((N - 1 - 2i) * (-o_j) - sum_k |o_j - o_k|) / tau` and takes a softmax over
//! `j`. At small `tau` row `i` concentrates on the element of rank `i`.

use learnds_autodiff::{CustomBackward, Tape, Tensor, Var};

use crate::error::{input_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SortMode {
    Soft,
    Hard,
}

/// An `N x N` row-stochastic matrix; a permutation matrix in hard mode.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPermutation {
    n: usize,
    matrix: Vec<f64>,
    mode: SortMode,
    tau: Option<f64>,
    order: Option<Vec<usize>>,
}

impl SoftPermutation {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.n..(i + 1) * self.n]
    }

    pub fn mode(&self) -> SortMode {
        self.mode
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    /// Element placed at each output position (hard mode only).
    pub fn order(&self) -> Option<&[usize]> {
        self.order.as_deref()
    }

    /// Column of the largest entry in every row, ties to the smaller column.
    pub fn row_argmax(&self) -> Vec<usize> {
        (0..self.n).map(|i| argmax(self.row(i))).collect()
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_ranks(ranks: &[f64]) -> Result<()> {
    if ranks.is_empty() {
        return input_err("rank vector must be nonempty");
    }
    if ranks.iter().any(|r| !r.is_finite()) {
        return input_err("rank vector contains a non-finite value");
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        input_err(format!("sort temperature must be positive, got {tau}"))
    }
}

/// Pre-softmax scores for one rank vector, row-major `N x N`.
fn sort_logits(ranks: &[f64], tau: f64, out: &mut [f64]) {
    let n = ranks.len();
    let spread: Vec<f64> = ranks
        .iter()
        .map(|&oj| ranks.iter().map(|&ok| (oj - ok).abs()).sum())
        .collect();
    for i in 0..n {
        let c = (n as f64) - 1.0 - 2.0 * i as f64;
        for j in 0..n {
            out[i * n + j] = (c * -ranks[j] - spread[j]) / tau;
        }
    }
}

fn softmax_rows(m: &mut [f64], n: usize) {
    for row in m.chunks_mut(n) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
}

pub fn soft_sort(ranks: &[f64], tau: f64) -> Result<SoftPermutation> {
    check_ranks(ranks)?;
    check_tau(tau)?;
    let n = ranks.len();
    let mut matrix = vec![0.0; n * n];
    sort_logits(ranks, tau, &mut matrix);
    softmax_rows(&mut matrix, n);
    Ok(SoftPermutation {
        n,
        matrix,
        mode: SortMode::Soft,
        tau: Some(tau),
        order: None,
    })
}

/// Stable ascending argsort; equal ranks keep their original index order.
pub fn argsort(ranks: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ranks.len()).collect();
    idx.sort_by(|&a, &b| ranks[a].total_cmp(&ranks[b]).then(a.cmp(&b)));
    idx
}

pub fn hard_sort(ranks: &[f64]) -> Result<SoftPermutation> {
    check_ranks(ranks)?;
    let n = ranks.len();
    let order = argsort(ranks);
    let mut matrix = vec![0.0; n * n];
    for (i, &j) in order.iter().enumerate() {
        matrix[i * n + j] = 1.0;
    }
    Ok(SoftPermutation {
        n,
        matrix,
        mode: SortMode::Hard,
        tau: None,
        order: Some(order),
    })
}

/// `P * D` for `D` stored row-major as `N x dim`. Hard permutations gather
/// rows exactly.
pub fn apply_permutation(p: &SoftPermutation, data: &[f64], dim: usize) -> Result<Vec<f64>> {
    let n = p.n;
    if dim == 0 || data.len() != n * dim {
        return input_err(format!(
            "apply_permutation: permutation is {n}x{n} but data has {} values for dim {dim}",
            data.len()
        ));
    }
    if let Some(order) = &p.order {
        return Ok(order
            .iter()
            .flat_map(|&j| data[j * dim..(j + 1) * dim].iter().copied())
            .collect());
    }
    let mut out = vec![0.0; n * dim];
    for i in 0..n {
        for j in 0..n {
            let w = p.matrix[i * n + j];
            for c in 0..dim {
                out[i * dim + c] += w * data[j * dim + c];
            }
        }
    }
    Ok(out)
}

/// Fraction of output positions holding the value that belongs there in
/// ascending order.
pub fn sortedness(p: &SoftPermutation, values: &[f64]) -> Result<f64> {
    if p.mode != SortMode::Hard {
        return input_err("sortedness needs a hard permutation");
    }
    let permuted = apply_permutation(p, values, 1)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let hits = permuted.iter().zip(&sorted).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / values.len() as f64)
}

struct SortLogitsBackward {
    n: usize,
    tau: f64,
}

impl CustomBackward for SortLogitsBackward {
    fn name(&self) -> &'static str {
        "soft_sort"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let n = self.n;
        let ranks = inputs[0].data();
        let mut grad = vec![0.0; ranks.len()];
        for (b, o) in ranks.chunks(n).enumerate() {
            let gb = &g[b * n * n..(b + 1) * n * n];
            let mut col = vec![0.0; n];
            let mut weighted = vec![0.0; n];
            for i in 0..n {
                let c = (n as f64) - 1.0 - 2.0 * i as f64;
                for j in 0..n {
                    col[j] += gb[i * n + j];
                    weighted[j] += gb[i * n + j] * c;
                }
            }
            for m in 0..n {
                let mut s_m = 0.0;
                let mut cross = 0.0;
                for k in 0..n {
                    let s = sign(o[m] - o[k]);
                    s_m += s;
                    cross -= col[k] * s;
                }
                grad[b * n + m] = (-weighted[m] - col[m] * s_m + cross) / self.tau;
            }
        }
        vec![Some(grad)]
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Soft sort on a tape: ranks `[B, N]` to row-stochastic `[B, N, N]`.
pub fn soft_sort_var(tape: &mut Tape, ranks: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let shape = tape.shape(ranks).to_vec();
    if shape.len() != 2 {
        return input_err(format!("soft_sort_var expects [B, N] ranks, got {shape:?}"));
    }
    let (b, n) = (shape[0], shape[1]);
    let mut logits = vec![0.0; b * n * n];
    for (row, out) in tape.value(ranks).data().chunks(n).zip(logits.chunks_mut(n * n)) {
        sort_logits(row, tau, out);
    }
    let logits = Tensor::new(vec![b, n, n], logits)?;
    let l = tape.custom(&[ranks], logits, Box::new(SortLogitsBackward { n, tau }))?;
    Ok(tape.softmax(l)?)
}
