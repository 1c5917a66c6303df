//! The learned nearest-neighbor structure: a set encoder that ranks the
//! dataset (and optionally emits extra tokens), followed by `M` query
//! networks that each read one row of the resulting structure.

use std::cell::Cell;

use learnds_autodiff::{gumbel_softmax, Binding, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{squared_distance, NnInstance};
use crate::diffsort::{argmax, hard_sort, soft_sort, soft_sort_var, SoftPermutation};
use crate::error::{config_err, input_err, Result};
use crate::layers::{Linear, Norm};
use crate::rng::seeded;
use crate::trace::LookupTrace;

/// Prefix of every data-processor parameter name.
pub const DATA_PROCESSOR_PREFIX: &str = "dp.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n: usize,
    pub d: usize,
    /// Extra-space tokens `T`.
    #[serde(default)]
    pub extra_tokens: usize,
    /// Lookup budget `M`.
    pub lookups: usize,
    /// Attention blocks `S`.
    pub layers: usize,
    pub heads: usize,
    /// Encoder width `E`.
    pub width: usize,
    /// Query MLP width `W`.
    pub query_width: usize,
    #[serde(default = "default_query_layers")]
    pub query_layers: usize,
    #[serde(default = "yes")]
    pub adaptive: bool,
    #[serde(default)]
    pub shared_weights: bool,
    /// `false` replaces the sort with a direct per-element read-out.
    #[serde(default = "yes")]
    pub permute: bool,
    #[serde(default = "default_tau")]
    pub sort_temperature: f64,
    #[serde(default = "default_gumbel")]
    pub gumbel_temperature: f64,
    /// Inputs are divided by this before entering any network.
    #[serde(default = "default_scale")]
    pub input_scale: f64,
}

fn default_query_layers() -> usize {
    3
}
fn yes() -> bool {
    true
}
fn default_tau() -> f64 {
    1.0
}
fn default_gumbel() -> f64 {
    learnds_autodiff::LOOKUP_TEMPERATURE
}
fn default_scale() -> f64 {
    1.0
}

impl ModelConfig {
    /// Desk-scale defaults for `N` points in `d` dimensions with `M` lookups.
    pub fn desk(n: usize, d: usize, lookups: usize) -> Self {
        Self {
            n,
            d,
            extra_tokens: 0,
            lookups,
            layers: 2,
            heads: 4,
            width: 32,
            query_width: 64,
            query_layers: 3,
            adaptive: true,
            shared_weights: false,
            permute: true,
            sort_temperature: default_tau(),
            gumbel_temperature: default_gumbel(),
            input_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return config_err("N must be at least 1");
        }
        if self.d == 0 || self.lookups == 0 || self.layers == 0 || self.query_layers == 0 {
            return config_err("d, M, S and query layers must be at least 1");
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return config_err(format!("width {} must split evenly into {} heads", self.width, self.heads));
        }
        if self.query_width == 0 {
            return config_err("query width must be at least 1");
        }
        for (name, v) in [
            ("sort_temperature", self.sort_temperature),
            ("gumbel_temperature", self.gumbel_temperature),
            ("input_scale", self.input_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return config_err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.n + self.extra_tokens
    }

    fn slot_width(&self) -> usize {
        2 + self.d
    }

    fn query_input_width(&self) -> usize {
        self.d + (self.lookups - 1) * self.slot_width()
    }

    fn query_nets(&self) -> usize {
        if self.shared_weights {
            1
        } else {
            self.lookups
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Extra {
    queries: ParamId,
    wk: ParamId,
    wv: ParamId,
    out: Linear,
}

#[derive(Clone, Debug)]
struct Encoder {
    embed1: Linear,
    embed2: Linear,
    blocks: Vec<Block>,
    ln_f: Norm,
    rank: Linear,
    direct: Option<Linear>,
    extra: Option<Extra>,
}

#[derive(Clone, Debug)]
struct QueryNet {
    hidden: Vec<(Linear, Norm)>,
    out: Linear,
}

/// One row-addressable structure `[D_P; b_1..b_T]` with an access counter.
#[derive(Clone, Debug)]
pub struct DataStructure {
    pub n: usize,
    pub extra: usize,
    pub d: usize,
    /// Row-major `(N + T) x d`.
    pub rows: Vec<f64>,
    /// Element stored at each of the first `N` rows, in hard mode.
    pub order: Option<Vec<usize>>,
    accesses: Cell<usize>,
}

impl DataStructure {
    pub fn new(n: usize, extra: usize, d: usize, rows: Vec<f64>, order: Option<Vec<usize>>) -> Self {
        Self {
            n,
            extra,
            d,
            rows,
            order,
            accesses: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.n + self.extra
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reads one row and counts the access.
    pub fn read(&self, j: usize) -> &[f64] {
        self.accesses.set(self.accesses.get() + 1);
        &self.rows[j * self.d..(j + 1) * self.d]
    }

    pub fn accesses(&self) -> usize {
        self.accesses.get()
    }
}

/// `m^T D` for a soft or one-hot selection `m`.
pub fn lookup(m: &[f64], rows: &[f64], d: usize) -> Result<Vec<f64>> {
    if d == 0 || rows.len() != m.len() * d {
        return input_err(format!("lookup: {} weights for {} values of width {d}", m.len(), rows.len()));
    }
    if m.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return input_err("lookup weights must be finite and nonnegative");
    }
    let total: f64 = m.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return input_err(format!("lookup weights sum to {total}, not 1"));
    }
    let mut v = vec![0.0; d];
    for (w, row) in m.iter().zip(rows.chunks(d)) {
        for (a, b) in v.iter_mut().zip(row) {
            *a += w * b;
        }
    }
    Ok(v)
}

/// One completed lookup: position read and value returned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub position: usize,
    pub value: Vec<f64>,
}

/// Eval-mode result for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelTrace {
    pub trace: LookupTrace,
    pub prediction: Vec<f64>,
    /// Rows of the structure touched while answering.
    pub accesses: usize,
    /// Element stored at each sorted position, when the model sorts.
    pub order: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Output of a training-mode forward pass.
pub struct TrainForward {
    pub loss: Var,
    /// Soft lookup values `v_i`, each `[B, d]`.
    pub values: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct NnModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    enc: Encoder,
    queries: Vec<QueryNet>,
}

impl NnModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed, &[crate::rng::tag::INIT]);
        let mut ps = ParamStore::new();
        let (e, d) = (config.width, config.d);
        let p = DATA_PROCESSOR_PREFIX;
        let embed1 = Linear::new(&mut ps, &format!("{p}embed1"), d, e, &mut rng);
        let embed2 = Linear::new(&mut ps, &format!("{p}embed2"), e, e, &mut rng);
        let blocks = (0..config.layers)
            .map(|s| {
                let name = format!("{p}block{s}");
                Block {
                    ln1: Norm::new(&mut ps, &format!("{name}.ln1"), e),
                    wq: ps.add_glorot(format!("{name}.wq"), e, e, &mut rng),
                    wk: ps.add_glorot(format!("{name}.wk"), e, e, &mut rng),
                    wv: ps.add_glorot(format!("{name}.wv"), e, e, &mut rng),
                    wo: Linear::new(&mut ps, &format!("{name}.wo"), e, e, &mut rng),
                    ln2: Norm::new(&mut ps, &format!("{name}.ln2"), e),
                    ff1: Linear::new(&mut ps, &format!("{name}.ff1"), e, 2 * e, &mut rng),
                    ff2: Linear::new(&mut ps, &format!("{name}.ff2"), 2 * e, e, &mut rng),
                }
            })
            .collect();
        let ln_f = Norm::new(&mut ps, &format!("{p}ln_f"), e);
        let rank = Linear::new(&mut ps, &format!("{p}rank"), e, 1, &mut rng);
        let direct = (!config.permute).then(|| Linear::new(&mut ps, &format!("{p}direct"), e, d, &mut rng));
        let extra = (config.extra_tokens > 0).then(|| Extra {
            queries: ps.add_normal(format!("{p}extra.queries"), &[e, config.extra_tokens], 1.0, &mut rng),
            wk: ps.add_glorot(format!("{p}extra.wk"), e, e, &mut rng),
            wv: ps.add_glorot(format!("{p}extra.wv"), e, e, &mut rng),
            out: Linear::new(&mut ps, &format!("{p}extra.out"), e, d, &mut rng),
        });
        let enc = Encoder {
            embed1,
            embed2,
            blocks,
            ln_f,
            rank,
            direct,
            extra,
        };
        let queries = (0..config.query_nets())
            .map(|i| {
                let mut fan_in = config.query_input_width();
                let hidden = (0..config.query_layers)
                    .map(|l| {
                        let name = format!("q{i}.h{l}");
                        let lin = Linear::new(&mut ps, &name, fan_in, config.query_width, &mut rng);
                        fan_in = config.query_width;
                        (lin, Norm::new(&mut ps, &format!("{name}.ln"), config.query_width))
                    })
                    .collect();
                let out = Linear::new(&mut ps, &format!("q{i}.out"), fan_in, config.rows(), &mut rng);
                QueryNet { hidden, out }
            })
            .collect();
        Ok(Self {
            config,
            params: ps,
            enc,
            queries,
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.names() != params.names() {
            return input_err("stored parameter names do not match the model config");
        }
        for (a, b) in model.params.tensors().iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return input_err("stored parameter shapes do not match the model config");
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn bind(&self, tape: &mut Tape, train_data_processor: bool, train_queries: bool) -> Result<Binding> {
        Ok(self.params.bind(tape, |name| {
            if name.starts_with(DATA_PROCESSOR_PREFIX) {
                train_data_processor
            } else {
                train_queries
            }
        })?)
    }

    /// Encoder hidden states `[B, N, E]` and ranks `[B, N]`.
    fn encode(&self, tape: &mut Tape, p: &Binding, batch: &[&NnInstance]) -> Result<(Var, Var)> {
        let c = &self.config;
        let (b, n, d) = (batch.len(), c.n, c.d);
        let mut x = Vec::with_capacity(b * n * d);
        for inst in batch {
            check_instance(c, inst)?;
            x.extend(inst.data.iter().map(|v| v / c.input_scale));
        }
        let x = tape.constant(Tensor::new(vec![b, n, d], x)?)?;
        let h = self.enc.embed1.apply(tape, p, x)?;
        let h = tape.relu(h)?;
        let mut h = self.enc.embed2.apply(tape, p, h)?;
        let heads = c.heads;
        let dh = c.width / heads;
        for blk in &self.enc.blocks {
            let z = blk.ln1.apply(tape, p, h)?;
            let qa = tape.matmul(z, p.var(blk.wq))?;
            let ka = tape.matmul(z, p.var(blk.wk))?;
            let va = tape.matmul(z, p.var(blk.wv))?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice(qa, 2, hd * dh, dh)?;
                let kh = tape.slice(ka, 2, hd * dh, dh)?;
                let vh = tape.slice(va, 2, hd * dh, dh)?;
                let s = tape.bmm(qh, kh, true)?;
                let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
                let a = tape.softmax(s)?;
                outs.push(tape.bmm(a, vh, false)?);
            }
            let att = if heads == 1 { outs[0] } else { tape.concat(&outs, 2)? };
            let att = blk.wo.apply(tape, p, att)?;
            h = tape.add(h, att)?;
            let z = blk.ln2.apply(tape, p, h)?;
            let f = blk.ff1.apply(tape, p, z)?;
            let f = tape.relu(f)?;
            let f = blk.ff2.apply(tape, p, f)?;
            h = tape.add(h, f)?;
        }
        let h = self.enc.ln_f.apply(tape, p, h)?;
        let r = self.enc.rank.apply(tape, p, h)?;
        let ranks = tape.reshape(r, &[b, n])?;
        Ok((h, ranks))
    }

    /// Extra tokens `[B, T, d]` in data units.
    fn extra_tokens(&self, tape: &mut Tape, p: &Binding, hidden: Var) -> Result<Option<Var>> {
        let Some(ex) = &self.enc.extra else { return Ok(None) };
        let e = self.config.width;
        let k = tape.matmul(hidden, p.var(ex.wk))?;
        let v = tape.matmul(hidden, p.var(ex.wv))?;
        let s = tape.matmul(k, p.var(ex.queries))?;
        let s = tape.scale(s, 1.0 / (e as f64).sqrt())?;
        let s = tape.transpose(s)?;
        let a = tape.softmax(s)?;
        let pooled = tape.bmm(a, v, false)?;
        let out = ex.out.apply(tape, p, pooled)?;
        Ok(Some(tape.scale(out, self.config.input_scale)?))
    }

    /// Direct read-out rows `[B, N, d]` used when the sort is ablated.
    fn direct_rows(&self, tape: &mut Tape, p: &Binding, hidden: Var) -> Result<Var> {
        let lin = self.enc.direct.expect("direct head exists without permutation");
        let out = lin.apply(tape, p, hidden)?;
        Ok(tape.scale(out, self.config.input_scale)?)
    }

    fn query_logits(&self, tape: &mut Tape, p: &Binding, step: usize, input: Var) -> Result<Var> {
        let net = &self.queries[if self.config.shared_weights { 0 } else { step }];
        let mut h = input;
        for (lin, norm) in &net.hidden {
            h = lin.apply(tape, p, h)?;
            h = norm.apply(tape, p, h)?;
            h = tape.relu(h)?;
        }
        net.out.apply(tape, p, h)
    }

    /// Query-network input rows `[q / s, slots...]` for an eval batch.
    fn encode_inputs(&self, queries: &[&[f64]], histories: &[Vec<HistoryEntry>]) -> Result<Tensor> {
        let c = &self.config;
        let width = c.query_input_width();
        let mut data = vec![0.0; queries.len() * width];
        for (b, (q, hist)) in queries.iter().zip(histories).enumerate() {
            let row = &mut data[b * width..(b + 1) * width];
            for (r, v) in row.iter_mut().zip(q.iter()) {
                *r = v / c.input_scale;
            }
            if c.adaptive {
                for (j, h) in hist.iter().enumerate() {
                    let slot = &mut row[c.d + j * c.slot_width()..c.d + (j + 1) * c.slot_width()];
                    slot[0] = 1.0;
                    slot[1] = h.position as f64 / c.rows() as f64;
                    for (s, v) in slot[2..].iter_mut().zip(&h.value) {
                        *s = v / c.input_scale;
                    }
                }
            }
        }
        Ok(Tensor::new(vec![queries.len(), width], data)?)
    }

    /// Ranks `o` for each instance (no gradients).
    pub fn ranks(&self, batch: &[&NnInstance]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false, false)?;
        let (_, ranks) = self.encode(&mut tape, &p, batch)?;
        Ok(tape.value(ranks).data().chunks(self.config.n).map(<[f64]>::to_vec).collect())
    }

    /// Builds `D-hat` for each instance. Train mode applies the soft sort;
    /// eval mode the hard one.
    pub fn build_structures(&self, batch: &[&NnInstance], mode: Mode) -> Result<Vec<(DataStructure, SoftPermutation)>> {
        let c = &self.config;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false, false)?;
        let (hidden, ranks) = self.encode(&mut tape, &p, batch)?;
        let extra = self.extra_tokens(&mut tape, &p, hidden)?;
        let direct = if c.permute { None } else { Some(self.direct_rows(&mut tape, &p, hidden)?) };
        let mut out = Vec::with_capacity(batch.len());
        for (b, inst) in batch.iter().enumerate() {
            let o = &tape.value(ranks).data()[b * c.n..(b + 1) * c.n];
            let perm = match mode {
                Mode::Train => soft_sort(o, c.sort_temperature)?,
                Mode::Eval => hard_sort(o)?,
            };
            let mut rows = match direct {
                Some(v) => tape.value(v).data()[b * c.n * c.d..(b + 1) * c.n * c.d].to_vec(),
                None => crate::diffsort::apply_permutation(&perm, &inst.data, c.d)?,
            };
            if let Some(ex) = extra {
                let t = c.extra_tokens * c.d;
                rows.extend_from_slice(&tape.value(ex).data()[b * t..(b + 1) * t]);
            }
            let order = (mode == Mode::Eval && c.permute).then(|| perm.order().unwrap().to_vec());
            out.push((DataStructure::new(c.n, c.extra_tokens, c.d, rows, order), perm));
        }
        Ok(out)
    }

    pub fn build_structure(&self, inst: &NnInstance, mode: Mode) -> Result<(DataStructure, SoftPermutation)> {
        Ok(self.build_structures(&[inst], mode)?.pop().unwrap())
    }

    /// One query network evaluated on a single query. Train mode returns a
    /// noisy softmax; eval mode a one-hot argmax.
    pub fn query_step<R: Rng>(
        &self,
        q: &[f64],
        history: &[HistoryEntry],
        step: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if step >= self.config.lookups {
            return input_err(format!("step {step} exceeds the lookup budget"));
        }
        if history.len() != step {
            return input_err(format!("step {step} needs {step} history entries, got {}", history.len()));
        }
        let logits = self.step_logits(&[q], &[history.to_vec()], step)?;
        let k = self.config.rows();
        match mode {
            Mode::Eval => {
                let mut m = vec![0.0; k];
                m[argmax(&logits)] = 1.0;
                Ok(m)
            }
            Mode::Train => {
                let mut tape = Tape::new();
                let l = tape.constant(Tensor::new(vec![1, k], logits)?)?;
                let noise = learnds_autodiff::gumbel_noise(&[1, k], rng);
                let m = gumbel_softmax(&mut tape, l, noise, self.config.gumbel_temperature)?;
                Ok(tape.value(m).data().to_vec())
            }
        }
    }

    fn step_logits(&self, queries: &[&[f64]], histories: &[Vec<HistoryEntry>], step: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false, false)?;
        let input = tape.constant(self.encode_inputs(queries, histories)?)?;
        let logits = self.query_logits(&mut tape, &p, step, input)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Hard-mode query execution for a batch of instances.
    pub fn run_batch(&self, batch: &[&NnInstance]) -> Result<Vec<ModelTrace>> {
        let c = &self.config;
        let structures = self.build_structures(batch, Mode::Eval)?;
        let queries: Vec<&[f64]> = batch.iter().map(|i| i.query.as_slice()).collect();
        let mut histories: Vec<Vec<HistoryEntry>> = vec![Vec::new(); batch.len()];
        for step in 0..c.lookups {
            let logits = self.step_logits(&queries, &histories, step)?;
            for (b, (s, _)) in structures.iter().enumerate() {
                let j = argmax(&logits[b * c.rows()..(b + 1) * c.rows()]);
                let value = s.read(j).to_vec();
                histories[b].push(HistoryEntry { position: j, value });
            }
        }
        let mut out = Vec::with_capacity(batch.len());
        for ((hist, (s, _)), q) in histories.into_iter().zip(&structures).zip(&queries) {
            let mut trace = LookupTrace::default();
            for h in hist {
                trace.push(h.position, h.value);
            }
            let prediction = if c.adaptive {
                trace.values.last().unwrap().clone()
            } else {
                closest(&trace.values, q).clone()
            };
            out.push(ModelTrace {
                trace,
                prediction,
                accesses: s.accesses(),
                order: s.order.clone(),
            });
        }
        Ok(out)
    }

    pub fn run_query_execution(&self, inst: &NnInstance) -> Result<ModelTrace> {
        Ok(self.run_batch(&[inst])?.pop().unwrap())
    }

    /// Fraction of queries whose first-lookup argmax survives Gumbel noise
    /// added to the logits.
    pub fn first_lookup_noise_stability(&self, batch: &[&NnInstance], seed: u64) -> Result<f64> {
        let queries: Vec<&[f64]> = batch.iter().map(|i| i.query.as_slice()).collect();
        let logits = self.step_logits(&queries, &vec![Vec::new(); batch.len()], 0)?;
        let k = self.config.rows();
        let noise = learnds_autodiff::gumbel_noise(&[batch.len(), k], &mut seeded(seed, &[0xa015e]));
        let mut same = 0;
        for b in 0..batch.len() {
            let row = &logits[b * k..(b + 1) * k];
            let noisy: Vec<f64> = row.iter().zip(&noise.data()[b * k..(b + 1) * k]).map(|(l, g)| l + g).collect();
            same += usize::from(argmax(row) == argmax(&noisy));
        }
        Ok(same as f64 / batch.len() as f64)
    }

    /// Training-mode forward pass over a batch: soft sort, noisy soft
    /// lookups, and the chosen loss. `aux_weight` adds the mean squared error
    /// of the intermediate lookups.
    pub fn train_forward<R: Rng>(
        &self,
        tape: &mut Tape,
        p: &Binding,
        batch: &[&NnInstance],
        loss: LossKind,
        aux_weight: f64,
        rng: &mut R,
    ) -> Result<TrainForward> {
        let c = &self.config;
        let (bsz, n, d, k, m) = (batch.len(), c.n, c.d, c.rows(), c.lookups);
        let (hidden, ranks) = self.encode(tape, p, batch)?;
        let dp = if c.permute {
            let perm = soft_sort_var(tape, ranks, c.sort_temperature)?;
            let raw: Vec<f64> = batch.iter().flat_map(|i| i.data.iter().copied()).collect();
            let raw = tape.constant(Tensor::new(vec![bsz, n, d], raw)?)?;
            tape.bmm(perm, raw, false)?
        } else {
            self.direct_rows(tape, p, hidden)?
        };
        let structure = match self.extra_tokens(tape, p, hidden)? {
            Some(ex) => tape.concat(&[dp, ex], 1)?,
            None => dp,
        };

        let inv = 1.0 / c.input_scale;
        let q: Vec<f64> = batch.iter().flat_map(|i| i.query.iter().map(|v| v * inv)).collect();
        let q = tape.constant(Tensor::new(vec![bsz, d], q)?)?;
        let positions = tape.constant(Tensor::new(vec![k, 1], (0..k).map(|j| j as f64 / k as f64).collect())?)?;
        let ones = tape.constant(Tensor::full(&[bsz, 1], 1.0))?;
        let hist_width = (m - 1) * c.slot_width();
        let mut slots: Vec<Var> = Vec::new();
        let mut values = Vec::with_capacity(m);
        let mut log_probs = Vec::with_capacity(m);
        for step in 0..m {
            let mut parts = vec![q];
            if hist_width > 0 {
                let filled = if c.adaptive { slots.len() * c.slot_width() } else { 0 };
                if filled > 0 {
                    parts.extend(slots.iter().copied());
                }
                if filled < hist_width {
                    parts.push(tape.constant(Tensor::zeros(&[bsz, hist_width - filled]))?);
                }
            }
            let input = if parts.len() == 1 { q } else { tape.concat(&parts, 1)? };
            let logits = self.query_logits(tape, p, step, input)?;
            let noise = learnds_autodiff::gumbel_noise(&[bsz, k], rng);
            let noise = tape.constant(noise)?;
            let noisy = tape.add(logits, noise)?;
            let scaled = tape.scale(noisy, 1.0 / c.gumbel_temperature)?;
            let sel = tape.softmax(scaled)?;
            if loss == LossKind::CrossEntropy {
                log_probs.push(tape.log_softmax(scaled)?);
            }
            let sel3 = tape.reshape(sel, &[bsz, 1, k])?;
            let v = tape.bmm(sel3, structure, false)?;
            let v = tape.reshape(v, &[bsz, d])?;
            values.push(v);
            if c.adaptive && step + 1 < m {
                let pos = tape.matmul(sel, positions)?;
                let vs = tape.scale(v, inv)?;
                slots.push(tape.concat(&[ones, pos, vs], 1)?);
            }
        }

        // the non-adaptive model answers with whichever lookup lands closest
        let chosen: Vec<usize> = if c.adaptive {
            vec![m - 1; bsz]
        } else {
            (0..bsz)
                .map(|b| {
                    let cands: Vec<Vec<f64>> = values
                        .iter()
                        .map(|v| tape.value(*v).data()[b * d..(b + 1) * d].to_vec())
                        .collect();
                    let best = closest(&cands, &batch[b].query);
                    cands.iter().position(|c| c == best).unwrap()
                })
                .collect()
        };
        let select = |tape: &mut Tape, per_step: &[Var], width: usize| -> Result<Var> {
            if per_step.len() == 1 {
                return Ok(per_step[0]);
            }
            let stacked: Vec<Var> = per_step
                .iter()
                .map(|v| tape.reshape(*v, &[bsz, 1, width]))
                .collect::<std::result::Result<_, _>>()?;
            let stacked = tape.concat(&stacked, 1)?;
            let mut onehot = vec![0.0; bsz * per_step.len()];
            for (b, &i) in chosen.iter().enumerate() {
                onehot[b * per_step.len() + i] = 1.0;
            }
            let onehot = tape.constant(Tensor::new(vec![bsz, 1, per_step.len()], onehot)?)?;
            let out = tape.bmm(onehot, stacked, false)?;
            Ok(tape.reshape(out, &[bsz, width])?)
        };

        let y: Vec<f64> = batch.iter().flat_map(|i| i.y_value.iter().copied()).collect();
        let y = tape.constant(Tensor::new(vec![bsz, d], y)?)?;
        let mut total = match loss {
            LossKind::Mse => {
                let pred = select(tape, &values[..], d)?;
                mse(tape, pred, y, inv)?
            }
            LossKind::CrossEntropy => {
                let targets: Vec<usize> = if c.permute {
                    let o = tape.value(ranks).data();
                    batch
                        .iter()
                        .enumerate()
                        .map(|(b, inst)| {
                            let order = crate::diffsort::argsort(&o[b * n..(b + 1) * n]);
                            order.iter().position(|&e| e == inst.y_index).unwrap()
                        })
                        .collect()
                } else {
                    batch.iter().map(|i| i.y_index).collect()
                };
                let picked: Vec<Var> = log_probs
                    .iter()
                    .map(|lp| tape.pick(*lp, &targets))
                    .collect::<std::result::Result<_, _>>()?;
                let chosen_lp = select(tape, &picked, 1)?;
                let mean = tape.mean(chosen_lp)?;
                tape.scale(mean, -1.0)?
            }
        };
        if aux_weight > 0.0 && m > 1 {
            for v in &values[..m - 1] {
                let e = mse(tape, *v, y, inv)?;
                let e = tape.scale(e, aux_weight / (m - 1) as f64)?;
                total = tape.add(total, e)?;
            }
        }
        Ok(TrainForward { loss: total, values })
    }
}

fn mse(tape: &mut Tape, pred: Var, y: Var, inv: f64) -> Result<Var> {
    let diff = tape.sub(pred, y)?;
    let diff = tape.scale(diff, inv)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq)?)
}

fn check_instance(c: &ModelConfig, inst: &NnInstance) -> Result<()> {
    if inst.n != c.n || inst.d != c.d || inst.data.len() != c.n * c.d || inst.query.len() != c.d {
        return input_err(format!(
            "instance is {}x{} but the model expects {}x{}",
            inst.n, inst.d, c.n, c.d
        ));
    }
    Ok(())
}

/// Candidate nearest to `q`; ties keep the earlier one.
fn closest<'a>(cands: &'a [Vec<f64>], q: &[f64]) -> &'a Vec<f64> {
    let mut best = &cands[0];
    for c in &cands[1..] {
        if squared_distance(c, q) < squared_distance(best, q) {
            best = c;
        }
    }
    best
}
