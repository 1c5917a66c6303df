//! Learned streaming frequency estimation: a `k`-dimensional sketch written
//! by an update network and read back by `M` query networks and a scalar
//! predictor `psi`.

use std::cell::Cell;
use std::collections::HashMap;

use learnds_autodiff::{gumbel_noise, AdamConfig, AdamState, Binding, Checkpoint, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{CountMinSketch, MultiplyShift};
use crate::datagen::{gen_stream_with, QuerySchedule, StreamInstance, StreamSpec};
use crate::diffsort::argmax;
use crate::error::{config_err, input_err, Error, Result};
use crate::layers::Linear;
use crate::nn_model::Mode;
use crate::rng::{derive_seed, seeded, tag};

pub const ENCODING_BITS: usize = 16;

/// Binary expansion of `e` over [`ENCODING_BITS`] bits, least significant
/// first, mapped to `{-1, +1}`.
pub fn encode_element(e: usize) -> Result<[f64; ENCODING_BITS]> {
    if e >= 1 << ENCODING_BITS {
        return input_err(format!("element {e} does not fit in {ENCODING_BITS} bits"));
    }
    let mut out = [0.0; ENCODING_BITS];
    for (i, o) in out.iter_mut().enumerate() {
        *o = if (e >> i) & 1 == 1 { 1.0 } else { -1.0 };
    }
    Ok(out)
}

/// The sketch `D-hat` and the number of stream elements folded into it.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchState {
    pub values: Vec<f64>,
    pub t: usize,
    /// Coordinates written by eval-mode updates.
    pub writes: usize,
    reads: Cell<usize>,
}

impl SketchState {
    pub fn new(k: usize) -> Self {
        Self {
            values: vec![0.0; k],
            t: 0,
            writes: 0,
            reads: Cell::new(0),
        }
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    /// Coordinates read by eval-mode queries.
    pub fn reads(&self) -> usize {
        self.reads.get()
    }

    fn read(&self, j: usize) -> f64 {
        self.reads.set(self.reads.get() + 1);
        self.values[j]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreqConfig {
    /// Sketch size `k`.
    pub k: usize,
    /// Positions written per update and lookups per query (`M`).
    pub lookups: usize,
    /// Universe size `K`; elements are `1..=K`.
    pub universe: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_psi_width")]
    pub psi_width: usize,
    #[serde(default = "default_gumbel")]
    pub gumbel_temperature: f64,
    /// Counts are divided by this before entering `psi` or a query history.
    #[serde(default = "default_count_scale")]
    pub count_scale: f64,
}

fn default_width() -> usize {
    64
}
fn default_psi_width() -> usize {
    128
}
fn default_gumbel() -> f64 {
    learnds_autodiff::LOOKUP_TEMPERATURE
}
fn default_count_scale() -> f64 {
    10.0
}

impl FreqConfig {
    pub fn desk(k: usize, lookups: usize, universe: usize) -> Self {
        Self {
            k,
            lookups,
            universe,
            width: default_width(),
            psi_width: default_psi_width(),
            gumbel_temperature: default_gumbel(),
            count_scale: default_count_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.lookups == 0 || self.width == 0 || self.psi_width == 0 {
            return config_err("k, M and network widths must be at least 1");
        }
        if self.universe == 0 || self.universe >= 1 << ENCODING_BITS {
            return config_err(format!("universe must be in 1..{}", 1 << ENCODING_BITS));
        }
        for (name, v) in [("gumbel_temperature", self.gumbel_temperature), ("count_scale", self.count_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return config_err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    fn slot_width() -> usize {
        3
    }

    fn query_input_width(&self) -> usize {
        ENCODING_BITS + (self.lookups - 1) * Self::slot_width()
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    hidden: Vec<Linear>,
    out: Linear,
}

impl Mlp {
    fn new<R: Rng>(ps: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut R) -> Self {
        let mut layers: Vec<Linear> = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        let out = layers.pop().unwrap();
        Self { hidden: layers, out }
    }

    fn apply(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.hidden {
            h = l.apply(tape, p, h)?;
            h = tape.relu(h)?;
        }
        self.out.apply(tape, p, h)
    }
}

/// The trainable networks: update MLP with position and value heads, one
/// query MLP per lookup, and `psi`.
#[derive(Clone, Debug)]
pub struct LearnedFreq {
    pub config: FreqConfig,
    pub params: ParamStore,
    /// Hidden layers shared by the position and value heads.
    update: Vec<Linear>,
    positions: Linear,
    values: Linear,
    queries: Vec<Mlp>,
    psi: Mlp,
}

impl LearnedFreq {
    pub fn new(config: FreqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed, &[tag::INIT, 0xf4e9]);
        let mut ps = ParamStore::new();
        let (w, k, m) = (config.width, config.k, config.lookups);
        let update = vec![
            Linear::new(&mut ps, "upd.l0", ENCODING_BITS, w, &mut rng),
            Linear::new(&mut ps, "upd.l1", w, w, &mut rng),
        ];
        let positions = Linear::new(&mut ps, "upd.pos", w, m * k, &mut rng);
        let values = Linear {
            w: ps.add_normal("upd.val.w", &[w, m], 0.01, &mut rng),
            b: ps.add_full("upd.val.b", &[m], 1.0),
        };
        let queries = (0..m)
            .map(|i| Mlp::new(&mut ps, &format!("q{i}"), &[config.query_input_width(), w, w, k], &mut rng))
            .collect();
        let pw = config.psi_width;
        let psi = Mlp::new(&mut ps, "psi", &[m, pw, pw, 1], &mut rng);
        Ok(Self {
            config,
            params: ps,
            update,
            positions,
            values,
            queries,
            psi,
        })
    }

    pub fn from_params(config: FreqConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.names() != params.names()
            || model.params.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return input_err("stored parameters do not match the frequency model config");
        }
        model.params = params;
        Ok(model)
    }

    fn encodings(&self, elements: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(elements.len() * ENCODING_BITS);
        for &e in elements {
            check_element(e, self.config.universe)?;
            data.extend(encode_element(e)?);
        }
        Ok(Tensor::new(vec![elements.len(), ENCODING_BITS], data)?)
    }

    /// Position logits `[n, M*k]` and values `[n, M]`.
    fn update_heads(&self, tape: &mut Tape, p: &Binding, enc: Var) -> Result<(Var, Var)> {
        let mut h = enc;
        for l in &self.update {
            h = l.apply(tape, p, h)?;
            h = tape.relu(h)?;
        }
        let logits = self.positions.apply(tape, p, h)?;
        let vals = self.values.apply(tape, p, h)?;
        Ok((logits, vals))
    }

    fn query_inputs(&self, elements: &[usize], histories: &[Vec<(usize, f64)>]) -> Result<Tensor> {
        let c = &self.config;
        let width = c.query_input_width();
        let mut data = vec![0.0; elements.len() * width];
        for (b, (&e, hist)) in elements.iter().zip(histories).enumerate() {
            check_element(e, c.universe)?;
            let row = &mut data[b * width..(b + 1) * width];
            row[..ENCODING_BITS].copy_from_slice(&encode_element(e)?);
            for (j, &(pos, v)) in hist.iter().enumerate() {
                let slot = &mut row[ENCODING_BITS + 3 * j..ENCODING_BITS + 3 * (j + 1)];
                slot[0] = 1.0;
                slot[1] = pos as f64 / c.k as f64;
                slot[2] = v / c.count_scale;
            }
        }
        Ok(Tensor::new(vec![elements.len(), width], data)?)
    }

    fn psi_value(&self, retrieved: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false)?;
        let x: Vec<f64> = retrieved.iter().map(|v| v / self.config.count_scale).collect();
        let x = tape.constant(Tensor::new(vec![1, x.len()], x)?)?;
        let y = self.psi.apply(&mut tape, &p, x)?;
        Ok(tape.value(y).data()[0] * self.config.count_scale)
    }

    /// Training-mode loss on a batch of streams that all carry the same
    /// number of queries: mean absolute error of the estimates.
    pub fn train_forward<R: Rng>(
        &self,
        tape: &mut Tape,
        p: &Binding,
        streams: &[&StreamInstance],
        rng: &mut R,
    ) -> Result<Var> {
        let c = &self.config;
        let (b, k, m) = (streams.len(), c.k, c.lookups);
        if b == 0 {
            return input_err("empty batch");
        }
        let t_len = streams[0].len();
        let nq = streams[0].queries.len();
        if t_len == 0 || nq == 0 {
            return input_err("training streams need at least one element and one query");
        }
        if streams.iter().any(|s| s.len() != t_len || s.queries.len() != nq) {
            return input_err("streams in a batch must share length and query count");
        }

        let elements: Vec<usize> = streams.iter().flat_map(|s| s.elements.iter().copied()).collect();
        let enc = tape.constant(self.encodings(&elements)?)?;
        let (logits, vals) = self.update_heads(tape, p, enc)?;
        let rows = b * t_len * m;
        let logits = tape.reshape(logits, &[rows, k])?;
        let noise = tape.constant(gumbel_noise(&[rows, k], rng))?;
        let noisy = tape.add(logits, noise)?;
        let noisy = tape.scale(noisy, 1.0 / c.gumbel_temperature)?;
        let u = tape.softmax(noisy)?;
        let vals = tape.reshape(vals, &[rows, 1])?;
        let ones_k = tape.constant(Tensor::full(&[1, k], 1.0))?;
        let spread = tape.matmul(vals, ones_k)?;
        let mut contrib = tape.mul(u, spread)?;
        if m > 1 {
            let c3 = tape.reshape(contrib, &[b * t_len, m, k])?;
            let c3 = tape.transpose(c3)?;
            contrib = tape.sum_last(c3)?;
        }
        let contrib = tape.reshape(contrib, &[b, t_len, k])?;

        // prefix masks pick out the sketch state each query sees
        let mut mask = vec![0.0; b * nq * t_len];
        let mut qel = Vec::with_capacity(b * nq);
        let mut counts = Vec::with_capacity(b * nq);
        for (bi, s) in streams.iter().enumerate() {
            for (qi, q) in s.queries.iter().enumerate() {
                let row = &mut mask[(bi * nq + qi) * t_len..(bi * nq + qi + 1) * t_len];
                row[..q.t].iter_mut().for_each(|x| *x = 1.0);
                qel.push(q.element);
                counts.push(q.count as f64);
            }
        }
        let mask = tape.constant(Tensor::new(vec![b, nq, t_len], mask)?)?;
        let states = tape.bmm(mask, contrib, false)?;
        let states = tape.reshape(states, &[b * nq, k])?;

        let bq = b * nq;
        let qenc = tape.constant(self.encodings(&qel)?)?;
        let positions = tape.constant(Tensor::new(vec![k, 1], (0..k).map(|j| j as f64 / k as f64).collect())?)?;
        let ones = tape.constant(Tensor::full(&[bq, 1], 1.0))?;
        let hist_width = (m - 1) * FreqConfig::slot_width();
        let inv = 1.0 / c.count_scale;
        let mut slots: Vec<Var> = Vec::new();
        let mut retrieved = Vec::with_capacity(m);
        for step in 0..m {
            let mut parts = vec![qenc];
            parts.extend(slots.iter().copied());
            let filled = slots.len() * FreqConfig::slot_width();
            if filled < hist_width {
                parts.push(tape.constant(Tensor::zeros(&[bq, hist_width - filled]))?);
            }
            let input = if parts.len() == 1 { qenc } else { tape.concat(&parts, 1)? };
            let logits = self.queries[step].apply(tape, p, input)?;
            let noise = tape.constant(gumbel_noise(&[bq, k], rng))?;
            let noisy = tape.add(logits, noise)?;
            let noisy = tape.scale(noisy, 1.0 / c.gumbel_temperature)?;
            let sel = tape.softmax(noisy)?;
            let r = tape.mul(sel, states)?;
            let r = tape.sum_last(r)?;
            let r = tape.reshape(r, &[bq, 1])?;
            let rs = tape.scale(r, inv)?;
            retrieved.push(rs);
            if step + 1 < m {
                let pos = tape.matmul(sel, positions)?;
                slots.push(tape.concat(&[ones, pos, rs], 1)?);
            }
        }
        let x = if m == 1 { retrieved[0] } else { tape.concat(&retrieved, 1)? };
        let est = self.psi.apply(tape, p, x)?;
        let est = tape.scale(est, c.count_scale)?;
        let y = tape.constant(Tensor::new(vec![bq, 1], counts)?)?;
        let diff = tape.sub(est, y)?;
        let abs = tape.abs(diff)?;
        Ok(tape.mean(abs)?)
    }
}

fn check_element(e: usize, universe: usize) -> Result<()> {
    if e == 0 || e > universe {
        return input_err(format!("element {e} is outside the universe 1..={universe}"));
    }
    Ok(())
}

/// FreqNets wired to reproduce a count-min sketch: update positions are the
/// row hashes offset by `row * w`, values are `delta`, lookups read the same
/// positions and `psi` is the minimum.
#[derive(Clone, Debug, PartialEq)]
pub struct CmsEmulation {
    pub width: usize,
    pub delta: f64,
    pub hashes: Vec<MultiplyShift>,
    pub universe: usize,
}

impl CmsEmulation {
    pub fn from_sketch(sketch: &CountMinSketch, universe: usize) -> Self {
        Self {
            width: sketch.width,
            delta: sketch.delta,
            hashes: sketch.hashes.clone(),
            universe,
        }
    }

    fn position(&self, row: usize, e: usize) -> usize {
        row * self.width + self.hashes[row].hash(e as u64, self.width)
    }
}

#[derive(Clone, Debug)]
pub enum FreqNets {
    Learned(LearnedFreq),
    CountMin(CmsEmulation),
}

/// Per-element update in matrix form: `M` position vectors over `k` and
/// their values.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdatePlan {
    pub positions: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl FreqNets {
    pub fn k(&self) -> usize {
        match self {
            FreqNets::Learned(l) => l.config.k,
            FreqNets::CountMin(c) => c.width * c.hashes.len(),
        }
    }

    pub fn lookups(&self) -> usize {
        match self {
            FreqNets::Learned(l) => l.config.lookups,
            FreqNets::CountMin(c) => c.hashes.len(),
        }
    }

    pub fn universe(&self) -> usize {
        match self {
            FreqNets::Learned(l) => l.config.universe,
            FreqNets::CountMin(c) => c.universe,
        }
    }

    /// The update for `e`: one-hot positions in eval mode, Gumbel-relaxed
    /// ones in train mode.
    pub fn update_plan<R: Rng>(&self, e: usize, mode: Mode, rng: &mut R) -> Result<UpdatePlan> {
        check_element(e, self.universe())?;
        let (k, m) = (self.k(), self.lookups());
        match self {
            FreqNets::CountMin(c) => Ok(UpdatePlan {
                positions: (0..m).map(|r| one_hot(k, c.position(r, e))).collect(),
                values: vec![c.delta; m],
            }),
            FreqNets::Learned(l) => {
                let mut tape = Tape::new();
                let p = l.params.bind(&mut tape, |_| false)?;
                let enc = tape.constant(l.encodings(&[e])?)?;
                let (logits, vals) = l.update_heads(&mut tape, &p, enc)?;
                let logits = tape.value(logits).data().to_vec();
                let values = tape.value(vals).data().to_vec();
                let positions = logits
                    .chunks(k)
                    .map(|row| relaxed_or_hard(row, mode, l.config.gumbel_temperature, rng))
                    .collect();
                Ok(UpdatePlan { positions, values })
            }
        }
    }

    /// Selection weights over the sketch for lookup `step` of a query.
    fn query_selection<R: Rng>(
        &self,
        q: usize,
        history: &[(usize, f64)],
        step: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        match self {
            FreqNets::CountMin(c) => Ok(one_hot(self.k(), c.position(step, q))),
            FreqNets::Learned(l) => {
                let mut tape = Tape::new();
                let p = l.params.bind(&mut tape, |_| false)?;
                let x = tape.constant(l.query_inputs(&[q], &[history.to_vec()])?)?;
                let logits = l.queries[step].apply(&mut tape, &p, x)?;
                let row = tape.value(logits).data().to_vec();
                Ok(relaxed_or_hard(&row, mode, l.config.gumbel_temperature, rng))
            }
        }
    }

    fn psi(&self, retrieved: &[f64]) -> Result<f64> {
        match self {
            FreqNets::CountMin(_) => Ok(retrieved.iter().copied().fold(f64::INFINITY, f64::min)),
            FreqNets::Learned(l) => l.psi_value(retrieved),
        }
    }
}

fn one_hot(k: usize, j: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[j] = 1.0;
    v
}

fn relaxed_or_hard<R: Rng>(logits: &[f64], mode: Mode, temperature: f64, rng: &mut R) -> Vec<f64> {
    match mode {
        Mode::Eval => one_hot(logits.len(), argmax(logits)),
        Mode::Train => {
            let noise = gumbel_noise(&[logits.len()], rng);
            let z: Vec<f64> = logits.iter().zip(noise.data()).map(|(l, g)| (l + g) / temperature).collect();
            let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        }
    }
}

/// Adds a plan to the state: `D += sum_i u_i * v_i`.
pub fn apply_update(state: &mut SketchState, plan: &UpdatePlan, mode: Mode) -> Result<()> {
    if plan.positions.iter().any(|u| u.len() != state.k()) {
        return input_err("update positions do not match the sketch size");
    }
    for (u, &v) in plan.positions.iter().zip(&plan.values) {
        if mode == Mode::Eval {
            state.writes += 1;
        }
        for (d, w) in state.values.iter_mut().zip(u) {
            if *w != 0.0 {
                *d += w * v;
            }
        }
    }
    state.t += 1;
    Ok(())
}

pub fn stream_update<R: Rng>(state: &mut SketchState, e: usize, nets: &FreqNets, mode: Mode, rng: &mut R) -> Result<()> {
    if state.k() != nets.k() {
        return input_err(format!("sketch has {} slots, nets expect {}", state.k(), nets.k()));
    }
    let plan = nets.update_plan(e, mode, rng)?;
    apply_update(state, &plan, mode)
}

/// `M` lookups into the sketch, each conditioned on the earlier ones, then
/// `psi` over the retrieved values.
pub fn estimate_frequency<R: Rng>(q: usize, state: &SketchState, nets: &FreqNets, mode: Mode, rng: &mut R) -> Result<f64> {
    check_element(q, nets.universe())?;
    if state.k() != nets.k() {
        return input_err(format!("sketch has {} slots, nets expect {}", state.k(), nets.k()));
    }
    let mut history: Vec<(usize, f64)> = Vec::with_capacity(nets.lookups());
    let mut retrieved = Vec::with_capacity(nets.lookups());
    for step in 0..nets.lookups() {
        let sel = nets.query_selection(q, &history, step, mode, rng)?;
        let (pos, v) = match mode {
            Mode::Eval => {
                let j = argmax(&sel);
                (j, state.read(j))
            }
            Mode::Train => {
                let v = sel.iter().zip(&state.values).map(|(a, b)| a * b).sum();
                let pos = sel.iter().enumerate().map(|(j, w)| j as f64 * w).sum::<f64>().round() as usize;
                (pos, v)
            }
        };
        history.push((pos, v));
        retrieved.push(v);
    }
    nets.psi(&retrieved)
}

/// Anything that can be fed a stream and asked for counts.
pub trait FrequencyEstimator {
    fn name(&self) -> String;
    fn reset(&mut self);
    fn update(&mut self, e: usize) -> Result<()>;
    fn estimate(&mut self, e: usize) -> Result<f64>;
}

/// Exact counts; the MAE oracle.
#[derive(Clone, Debug, Default)]
pub struct ExactCounter {
    counts: HashMap<usize, usize>,
}

impl FrequencyEstimator for ExactCounter {
    fn name(&self) -> String {
        "exact".into()
    }

    fn reset(&mut self) {
        self.counts.clear();
    }

    fn update(&mut self, e: usize) -> Result<()> {
        *self.counts.entry(e).or_default() += 1;
        Ok(())
    }

    fn estimate(&mut self, e: usize) -> Result<f64> {
        Ok(self.counts.get(&e).copied().unwrap_or(0) as f64)
    }
}

impl FrequencyEstimator for CountMinSketch {
    fn name(&self) -> String {
        format!("cms(w={},d={},delta={})", self.width, self.depth, self.delta)
    }

    fn reset(&mut self) {
        CountMinSketch::reset(self);
    }

    fn update(&mut self, e: usize) -> Result<()> {
        CountMinSketch::update(self, e);
        Ok(())
    }

    fn estimate(&mut self, e: usize) -> Result<f64> {
        Ok(self.query(e))
    }
}

/// Eval-mode FreqNets over a live sketch. Update plans and first lookups
/// depend only on the element, so they are cached across streams.
pub struct SketchRunner<'a> {
    pub nets: &'a FreqNets,
    pub state: SketchState,
    plans: HashMap<usize, UpdatePlan>,
}

impl<'a> SketchRunner<'a> {
    pub fn new(nets: &'a FreqNets) -> Self {
        Self {
            nets,
            state: SketchState::new(nets.k()),
            plans: HashMap::new(),
        }
    }
}

impl FrequencyEstimator for SketchRunner<'_> {
    fn name(&self) -> String {
        match self.nets {
            FreqNets::Learned(l) => format!("learned(k={},M={})", l.config.k, l.config.lookups),
            FreqNets::CountMin(c) => format!("cms_emulation(w={},d={})", c.width, c.hashes.len()),
        }
    }

    fn reset(&mut self) {
        self.state = SketchState::new(self.nets.k());
    }

    fn update(&mut self, e: usize) -> Result<()> {
        if !self.plans.contains_key(&e) {
            let plan = self.nets.update_plan(e, Mode::Eval, &mut rand::rngs::mock::StepRng::new(0, 0))?;
            self.plans.insert(e, plan);
        }
        let before = self.state.writes;
        apply_update(&mut self.state, &self.plans[&e], Mode::Eval)?;
        debug_assert!(self.state.writes - before <= self.nets.lookups());
        Ok(())
    }

    fn estimate(&mut self, e: usize) -> Result<f64> {
        let before = self.state.reads();
        let est = estimate_frequency(e, &self.state, self.nets, Mode::Eval, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        if self.state.reads() - before > self.nets.lookups() {
            return Err(Error::Integrity("query read more than M sketch coordinates".into()));
        }
        Ok(est)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeReport {
    pub method: String,
    /// MAE over queries at each 1-based timestep (index `t - 1`); `None`
    /// where no query landed.
    pub per_timestep: Vec<Option<f64>>,
    pub overall: f64,
    /// Mean absolute error of each stream's queries.
    pub per_stream: Vec<f64>,
    pub queries: usize,
}

/// Fixed-seed evaluation streams; stream `i` depends only on `(seed, i)`.
pub fn stream_suite(spec: &StreamSpec, t_len: usize, count: usize, seed: u64) -> Result<Vec<StreamInstance>> {
    (0..count as u64)
        .map(|i| gen_stream_with(spec, t_len, &mut seeded(seed, &[tag::EVAL, i])))
        .collect()
}

/// Replays every stream through `est`, answering each query after the
/// first `t` updates.
pub fn eval_mae(est: &mut dyn FrequencyEstimator, suite: &[StreamInstance]) -> Result<MaeReport> {
    let t_max = suite.iter().map(StreamInstance::len).max().unwrap_or(0);
    let mut sums = vec![0.0; t_max];
    let mut counts = vec![0usize; t_max];
    let mut per_stream = Vec::with_capacity(suite.len());
    let (mut total, mut queries) = (0.0, 0usize);
    for s in suite {
        est.reset();
        let mut qs = s.queries.clone();
        qs.sort_by_key(|q| q.t);
        let mut seen = 0;
        let mut stream_err = 0.0;
        for q in &qs {
            while seen < q.t {
                est.update(s.elements[seen])?;
                seen += 1;
            }
            let err = (est.estimate(q.element)? - q.count as f64).abs();
            sums[q.t - 1] += err;
            counts[q.t - 1] += 1;
            stream_err += err;
        }
        total += stream_err;
        queries += qs.len();
        per_stream.push(if qs.is_empty() { 0.0 } else { stream_err / qs.len() as f64 });
    }
    Ok(MaeReport {
        method: est.name(),
        per_timestep: sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| (c > 0).then(|| s / c as f64))
            .collect(),
        overall: if queries == 0 { 0.0 } else { total / queries as f64 },
        per_stream,
        queries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreqTrainConfig {
    pub model: FreqConfig,
    pub stream: StreamSpec,
    pub stream_len: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub max_steps: u64,
    pub eval_every: u64,
    pub eval_streams: usize,
    pub patience: u32,
    pub seed: u64,
}

impl FreqTrainConfig {
    /// Desk-scale defaults for a Zipf stream task.
    pub fn desk(k: usize, lookups: usize, universe: usize, alpha: f64, stream_len: usize) -> Self {
        Self {
            model: FreqConfig::desk(k, lookups, universe),
            stream: StreamSpec::zipf(universe, alpha),
            stream_len,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.0,
            max_steps: 2000,
            eval_every: 200,
            eval_streams: 200,
            patience: 5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.stream.universe != self.model.universe {
            return config_err("stream universe and model universe differ");
        }
        if self.stream_len == 0 {
            return config_err("stream length must be at least 1");
        }
        if let QuerySchedule::Random(0) = self.stream.schedule {
            return config_err("training streams need at least one query");
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_streams == 0 {
            return config_err("batch size, eval interval and eval streams must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err("learning rate must be positive");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    fn eval_spec(&self) -> StreamSpec {
        StreamSpec {
            schedule: QuerySchedule::EveryStep,
            ..self.stream.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqLogRow {
    pub step: u64,
    #[serde(deserialize_with = "crate::trainer::null_as_nan")]
    pub train_loss: f64,
    pub eval_mae: f64,
}

pub struct FreqTrainer {
    pub config: FreqTrainConfig,
    pub model: LearnedFreq,
    pub optimizer: AdamState,
    pub step: u64,
    pub best_params: ParamStore,
    pub best_mae: f64,
    pub evals_since_best: u32,
    pub log: Vec<FreqLogRow>,
    heldout: Vec<StreamInstance>,
    loss_sum: f64,
    loss_count: u64,
}

impl FreqTrainer {
    pub fn new(config: FreqTrainConfig) -> Result<Self> {
        config.validate()?;
        let model = LearnedFreq::new(config.model.clone(), config.seed)?;
        let optimizer = AdamState::new(
            AdamConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..AdamConfig::default()
            },
            model.params.tensors(),
        );
        let heldout = stream_suite(
            &config.eval_spec(),
            config.stream_len,
            config.eval_streams,
            derive_seed(config.seed, &[tag::HELDOUT]),
        )?;
        Ok(Self {
            best_params: model.params.clone(),
            config,
            model,
            optimizer,
            step: 0,
            best_mae: f64::INFINITY,
            evals_since_best: 0,
            log: Vec::new(),
            heldout,
            loss_sum: 0.0,
            loss_count: 0,
        })
    }

    pub fn train_step(&mut self) -> Result<f64> {
        let c = &self.config;
        let mut data_rng = seeded(c.seed, &[tag::BATCH, self.step]);
        let batch: Vec<StreamInstance> = (0..c.batch_size)
            .map(|_| gen_stream_with(&c.stream, c.stream_len, &mut data_rng))
            .collect::<Result<_>>()?;
        let refs: Vec<&StreamInstance> = batch.iter().collect();
        let mut noise_rng = seeded(c.seed, &[tag::NOISE, self.step]);
        let mut tape = Tape::new();
        let binding = self.model.params.bind(&mut tape, |_| true)?;
        let loss_var = self.model.train_forward(&mut tape, &binding, &refs, &mut noise_rng)?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                reason: format!("loss is {loss}"),
            });
        }
        let grads = tape.backward(loss_var)?;
        let grads = binding.gradients(&grads);
        self.optimizer.step(self.model.params.tensors_mut(), &grads)?;
        self.step += 1;
        self.loss_sum += loss;
        self.loss_count += 1;
        Ok(loss)
    }

    pub fn evaluate_heldout(&self) -> Result<MaeReport> {
        let nets = FreqNets::Learned(self.model.clone());
        eval_mae(&mut SketchRunner::new(&nets), &self.heldout)
    }

    fn checkpoint_eval(&mut self) -> Result<FreqLogRow> {
        let mae = self.evaluate_heldout()?.overall;
        if mae < self.best_mae {
            self.best_mae = mae;
            self.best_params = self.model.params.clone();
            self.evals_since_best = 0;
        } else {
            self.evals_since_best += 1;
        }
        let train_loss = if self.loss_count == 0 {
            f64::NAN
        } else {
            self.loss_sum / self.loss_count as f64
        };
        self.loss_sum = 0.0;
        self.loss_count = 0;
        let row = FreqLogRow {
            step: self.step,
            train_loss,
            eval_mae: mae,
        };
        self.log.push(row.clone());
        Ok(row)
    }

    /// Trains to `max_steps` or until `patience` evaluations pass without a
    /// new best held-out MAE.
    pub fn run(&mut self, mut on_log: impl FnMut(&FreqLogRow)) -> Result<()> {
        if self.log.is_empty() {
            let row = self.checkpoint_eval()?;
            on_log(&row);
        }
        while self.step < self.config.max_steps {
            self.train_step()?;
            if self.step % self.config.eval_every == 0 || self.step == self.config.max_steps {
                let row = self.checkpoint_eval()?;
                on_log(&row);
                if self.evals_since_best >= self.config.patience {
                    break;
                }
            }
        }
        Ok(())
    }

    pub fn best_model(&self) -> LearnedFreq {
        let mut m = self.model.clone();
        m.params = self.best_params.clone();
        m
    }

    pub fn checkpoint(&self) -> Checkpoint {
        freq_checkpoint(&self.best_model(), &self.config, self.step, &self.log)
    }
}

/// Trains a learned estimator and returns a checkpoint of its best
/// parameters.
pub fn train_freq(config: &FreqTrainConfig) -> Result<Checkpoint> {
    let mut t = FreqTrainer::new(config.clone())?;
    t.run(|row| log::info!("step {} loss {:.4} mae {:.4}", row.step, row.train_loss, row.eval_mae))?;
    Ok(t.checkpoint())
}

pub fn freq_checkpoint(model: &LearnedFreq, config: &FreqTrainConfig, step: u64, log: &[FreqLogRow]) -> Checkpoint {
    let meta = serde_json::json!({ "kind": "freq_model", "config": config, "log": log });
    Checkpoint::new(model.params.clone(), None, config.seed, config.hash(), step, meta)
}

pub fn load_freq_model(ck: &Checkpoint) -> Result<(LearnedFreq, FreqTrainConfig)> {
    let meta = &ck.manifest.meta;
    if meta.get("kind").and_then(|k| k.as_str()) != Some("freq_model") {
        return Err(Error::Integrity("checkpoint does not hold a frequency model".into()));
    }
    let config: FreqTrainConfig = serde_json::from_value(meta["config"].clone())?;
    if config.hash() != ck.manifest.config_hash {
        return Err(Error::Integrity("config hash mismatch".into()));
    }
    Ok((LearnedFreq::from_params(config.model.clone(), ck.params.clone())?, config))
}
