//! Instance samplers and the brute-force nearest-neighbor oracle.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Uniform1d,
    Zipf,
    Hard1d,
    Uniform2d,
    Hard2d,
    Hypersphere,
    SyntheticRep,
}

impl DistributionKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "uniform1d" => Self::Uniform1d,
            "zipf" => Self::Zipf,
            "hard1d" => Self::Hard1d,
            "uniform2d" => Self::Uniform2d,
            "hard2d" => Self::Hard2d,
            "hypersphere" => Self::Hypersphere,
            "synthetic_rep" => Self::SyntheticRep,
            other => return config_err(format!("unknown distribution kind '{other}'")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSpec {
    pub kind: DistributionKind,
    pub n: usize,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub universe: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<usize>,
    pub metric: Metric,
}

pub const HARD_A: f64 = 7.0;
pub const ZIPF_ALPHA: f64 = 1.2;
pub const SYNTHETIC_SIGMA: f64 = 0.05;

impl DistributionSpec {
    fn base(kind: DistributionKind, n: usize, d: usize) -> Self {
        Self {
            kind,
            n,
            d,
            alpha: None,
            a: None,
            rho: None,
            universe: None,
            labels: None,
            metric: Metric::Euclidean,
        }
    }

    pub fn uniform1d(n: usize) -> Self {
        Self::base(DistributionKind::Uniform1d, n, 1)
    }

    pub fn zipf(n: usize, universe: usize, alpha: f64) -> Self {
        Self {
            alpha: Some(alpha),
            universe: Some(universe),
            ..Self::base(DistributionKind::Zipf, n, 1)
        }
    }

    pub fn hard1d(n: usize, a: f64) -> Self {
        Self {
            a: Some(a),
            ..Self::base(DistributionKind::Hard1d, n, 1)
        }
    }

    pub fn uniform2d(n: usize) -> Self {
        Self::base(DistributionKind::Uniform2d, n, 2)
    }

    pub fn hard2d(n: usize, a: f64) -> Self {
        Self {
            a: Some(a),
            ..Self::base(DistributionKind::Hard2d, n, 2)
        }
    }

    pub fn hypersphere(n: usize, d: usize, rho: f64) -> Self {
        Self {
            rho: Some(rho),
            ..Self::base(DistributionKind::Hypersphere, n, d)
        }
    }

    pub fn synthetic_rep(n: usize, d: usize, labels: usize) -> Self {
        Self {
            labels: Some(labels),
            metric: Metric::Label,
            ..Self::base(DistributionKind::SyntheticRep, n, d)
        }
    }

    /// Checks that exactly the parameters the kind needs are present and in
    /// range.
    pub fn validate(&self) -> Result<()> {
        use DistributionKind::*;
        if self.n == 0 || self.d == 0 {
            return config_err("N and d must be at least 1");
        }
        let needs = match self.kind {
            Uniform1d | Uniform2d => [false, false, false, false, false],
            Zipf => [true, false, false, true, false],
            Hard1d | Hard2d => [false, true, false, false, false],
            Hypersphere => [false, false, true, false, false],
            SyntheticRep => [false, false, false, false, true],
        };
        let has = [
            self.alpha.is_some(),
            self.a.is_some(),
            self.rho.is_some(),
            self.universe.is_some(),
            self.labels.is_some(),
        ];
        let names = ["alpha", "a", "rho", "universe", "labels"];
        for i in 0..5 {
            if needs[i] != has[i] {
                let verb = if needs[i] { "requires" } else { "does not take" };
                return config_err(format!("{:?} {verb} parameter '{}'", self.kind, names[i]));
            }
        }
        let want_d = match self.kind {
            Uniform1d | Zipf | Hard1d => Some(1),
            Uniform2d | Hard2d => Some(2),
            Hypersphere | SyntheticRep => None,
        };
        if want_d.is_some_and(|w| w != self.d) {
            return config_err(format!("{:?} needs d = {}", self.kind, want_d.unwrap()));
        }
        let want_metric = if self.kind == SyntheticRep { Metric::Label } else { Metric::Euclidean };
        if self.metric != want_metric {
            return config_err(format!("{:?} needs the {want_metric:?} metric", self.kind));
        }
        if let Some(alpha) = self.alpha {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return config_err("alpha must be positive");
            }
        }
        if let Some(a) = self.a {
            if !(a > 1.0 && a.is_finite()) {
                return config_err("a must exceed 1");
            }
        }
        if let Some(rho) = self.rho {
            if !(0.0..=1.0).contains(&rho) {
                return config_err("rho must lie in [0, 1]");
            }
            if self.d < 2 && rho < 1.0 {
                return config_err("hypersphere with rho < 1 needs d >= 2");
            }
        }
        if let Some(k) = self.universe {
            if k < self.n {
                return config_err("zipf universe must hold N distinct values");
            }
        }
        if let Some(l) = self.labels {
            if l < self.n {
                return config_err("synthetic_rep needs at least N labels");
            }
        }
        Ok(())
    }
}

/// One nearest-neighbor problem. `data` is row-major `N x d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnInstance {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub query: Vec<f64>,
    pub y_index: usize,
    pub y_value: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_label: Option<usize>,
}

impl NnInstance {
    fn new(n: usize, d: usize, data: Vec<f64>, query: Vec<f64>) -> Result<Self> {
        let y_index = brute_force_nn(&data, d, &query)?;
        let y_value = data[y_index * d..(y_index + 1) * d].to_vec();
        Ok(Self {
            n,
            d,
            data,
            query,
            y_index,
            y_value,
            labels: None,
            query_label: None,
        })
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Re-runs the oracle under the instance's metric.
    pub fn recompute_nn(&self) -> Result<usize> {
        match (&self.labels, self.query_label) {
            (Some(labels), Some(ql)) => brute_force_label_nn(labels, ql),
            _ => brute_force_nn(&self.data, self.d, &self.query),
        }
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Linear scan under Euclidean distance; ties go to the smaller index.
pub fn brute_force_nn(data: &[f64], d: usize, query: &[f64]) -> Result<usize> {
    if d == 0 || data.is_empty() || data.len() % d != 0 {
        return input_err("brute_force_nn needs a nonempty N x d dataset");
    }
    if query.len() != d {
        return input_err(format!("query has {} coordinates, data has {d}", query.len()));
    }
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, x) in data.chunks(d).enumerate() {
        let dist = squared_distance(x, query);
        if dist < best_dist {
            best = i;
            best_dist = dist;
        }
    }
    Ok(best)
}

/// Nearest neighbor under the label metric `|l_i - l_q|`.
pub fn brute_force_label_nn(labels: &[usize], query_label: usize) -> Result<usize> {
    if labels.is_empty() {
        return input_err("brute_force_label_nn needs a nonempty dataset");
    }
    let mut best = 0;
    for (i, &l) in labels.iter().enumerate() {
        if l.abs_diff(query_label) < labels[best].abs_diff(query_label) {
            best = i;
        }
    }
    Ok(best)
}

/// Categorical sampler over `{1..K}` with `P(rank r) ∝ r^-alpha`. With
/// permuted ranks, element `rank_to_element[r]` holds rank `r + 1`.
#[derive(Clone, Debug)]
pub struct ZipfSampler {
    rank_probs: Vec<f64>,
    rank_to_element: Vec<usize>,
    element_rank: Vec<usize>,
    dist: WeightedIndex<f64>,
}

impl ZipfSampler {
    pub fn universe(&self) -> usize {
        self.rank_probs.len()
    }

    /// Probabilities indexed by rank, most likely first.
    pub fn rank_probs(&self) -> &[f64] {
        &self.rank_probs
    }

    pub fn prob(&self, element: usize) -> f64 {
        self.rank_probs[self.element_rank[element - 1]]
    }

    pub fn element_at_rank(&self, rank: usize) -> usize {
        self.rank_to_element[rank]
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        self.rank_to_element[self.dist.sample(rng)]
    }
}

pub fn sample_zipf(alpha: f64, k: usize, seed: u64, permute_ranks: bool) -> Result<ZipfSampler> {
    zipf_with(alpha, k, permute_ranks, &mut seeded(seed, &[0x21bf]))
}

fn zipf_with<R: Rng>(alpha: f64, k: usize, permute_ranks: bool, rng: &mut R) -> Result<ZipfSampler> {
    if k == 0 {
        return input_err("zipf universe must be nonempty");
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return input_err(format!("zipf alpha must be nonnegative, got {alpha}"));
    }
    let weights: Vec<f64> = (1..=k).map(|i| (i as f64).powf(-alpha)).collect();
    let z: f64 = weights.iter().sum();
    let rank_probs: Vec<f64> = weights.iter().map(|w| w / z).collect();
    let mut rank_to_element: Vec<usize> = (1..=k).collect();
    if permute_ranks {
        rank_to_element.shuffle(rng);
    }
    let mut element_rank = vec![0; k];
    for (r, &e) in rank_to_element.iter().enumerate() {
        element_rank[e - 1] = r;
    }
    let dist = WeightedIndex::new(&rank_probs).map_err(|e| Error::Input(e.to_string()))?;
    Ok(ZipfSampler {
        rank_probs,
        rank_to_element,
        element_rank,
        dist,
    })
}

/// The tree behind one draw from the hard distribution, in level order
/// (node `i` has children `2i + 1` and `2i + 2`).
#[derive(Clone, Debug)]
pub struct HardTree {
    pub values: Vec<f64>,
    pub levels: Vec<usize>,
}

impl HardTree {
    pub fn parent(i: usize) -> Option<usize> {
        (i > 0).then(|| (i - 1) / 2)
    }
}

pub fn sample_hard_tree<R: Rng>(n: usize, a: f64, rng: &mut R) -> HardTree {
    let top = (n as f64).log2();
    let mut values = vec![0.0; n];
    let mut levels = vec![0; n];
    for i in 0..n {
        let level = (usize::BITS - (i + 1).leading_zeros() - 1) as usize;
        levels[i] = level;
        let d = rng.gen::<f64>() * a.powf(top - level as f64);
        values[i] = match HardTree::parent(i) {
            None => d,
            Some(p) if i % 2 == 1 => values[p] - d,
            Some(p) => values[p] + d,
        };
    }
    HardTree { values, levels }
}

fn in_order(n: usize, i: usize, out: &mut Vec<usize>) {
    if i >= n {
        return;
    }
    in_order(n, 2 * i + 1, out);
    out.push(i);
    in_order(n, 2 * i + 2, out);
}

fn hard_with<R: Rng>(n: usize, a: f64, rng: &mut R) -> Vec<f64> {
    let tree = sample_hard_tree(n, a, rng);
    let mut order = Vec::with_capacity(n);
    in_order(n, 0, &mut order);
    let mut vals: Vec<f64> = order.iter().map(|&i| tree.values[i]).collect();
    vals.shuffle(rng);
    vals
}

/// `N` draws from the hard distribution, in random storage order.
pub fn sample_hard(n: usize, a: f64, seed: u64) -> Result<Vec<f64>> {
    if n == 0 || !(a > 1.0) {
        return input_err("sample_hard needs N >= 1 and a > 1");
    }
    Ok(hard_with(n, a, &mut seeded(seed, &[0x4a2d])))
}

/// A uniformly chosen data point plus Gaussian noise of standard deviation
/// `noise_std` per coordinate.
pub fn perturbed_query<R: Rng>(data: &[f64], d: usize, noise_std: f64, rng: &mut R) -> Vec<f64> {
    let i = rng.gen_range(0..data.len() / d);
    data[i * d..(i + 1) * d]
        .iter()
        .map(|&x| x + noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn sample_hard_query(data: &[f64], d: usize, seed: u64) -> Result<Vec<f64>> {
    if d == 0 || data.is_empty() || data.len() % d != 0 {
        return input_err("sample_hard_query needs a nonempty dataset");
    }
    Ok(perturbed_query(data, d, 1.0, &mut seeded(seed, &[0x9e11])))
}

fn unit_vector<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `rho * x + sqrt(1 - rho^2) * u` with `u` a random unit vector orthogonal
/// to the unit vector `x`.
fn query_at_inner_product<R: Rng>(x: &[f64], rho: f64, rng: &mut R) -> Vec<f64> {
    if rho >= 1.0 {
        return x.to_vec();
    }
    let u = loop {
        let g = unit_vector(x.len(), rng);
        let dot: f64 = g.iter().zip(x).map(|(a, b)| a * b).sum();
        let mut u: Vec<f64> = g.iter().zip(x).map(|(a, b)| a - dot * b).collect();
        // a second projection pass keeps the inner product at rounding level
        let dot2: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum();
        u.iter_mut().zip(x).for_each(|(a, b)| *a -= dot2 * b);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            break u.into_iter().map(|v| v / norm).collect::<Vec<_>>();
        }
    };
    let s = (1.0 - rho * rho).sqrt();
    x.iter().zip(&u).map(|(a, b)| rho * a + s * b).collect()
}

pub fn sample_hypersphere_pair(d: usize, rho: f64, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&rho) {
        return input_err(format!("rho must lie in [0, 1], got {rho}"));
    }
    if d == 0 || (d < 2 && rho < 1.0) {
        return input_err("hypersphere pairs with rho < 1 need d >= 2");
    }
    let mut rng = seeded(seed, &[0x5fe4]);
    let x = unit_vector(d, &mut rng);
    let q = query_at_inner_product(&x, rho, &mut rng);
    Ok((x, q))
}

/// Fixed embedding map for the synthetic representation task.
#[derive(Clone, Debug)]
pub struct SyntheticRepSpace {
    pub labels: usize,
    pub d: usize,
    pub sigma: f64,
    w: Vec<f64>,
}

/// Seed of the embedding matrix, shared by every synthetic instance.
const SYNTHETIC_W_SEED: u64 = 0x5EED_0001;
/// Standard deviation of the embedding matrix entries.
const SYNTHETIC_W_STD: f64 = 8.0;

impl SyntheticRepSpace {
    pub fn new(labels: usize, d: usize, sigma: f64) -> Self {
        let mut rng = seeded(SYNTHETIC_W_SEED, &[d as u64]);
        let w = (0..d * 3)
            .map(|_| SYNTHETIC_W_STD * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { labels, d, sigma, w }
    }

    pub fn clean_embedding(&self, label: usize) -> Vec<f64> {
        let t = label as f64 / self.labels as f64;
        let f = [t, t * t, (2.0 * std::f64::consts::PI * t).sin()];
        (0..self.d)
            .map(|r| (0..3).map(|c| self.w[r * 3 + c] * f[c]).sum::<f64>().tanh())
            .collect()
    }

    pub fn embed<R: Rng>(&self, label: usize, rng: &mut R) -> Vec<f64> {
        let mut e = self.clean_embedding(label);
        if self.sigma > 0.0 {
            for x in &mut e {
                *x += self.sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        e
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<NnInstance> {
        if n > self.labels {
            return input_err(format!("need N <= L, got N = {n}, L = {}", self.labels));
        }
        let labels: Vec<usize> = index::sample(rng, self.labels, n).into_vec();
        let mut data = Vec::with_capacity(n * self.d);
        for &l in &labels {
            data.extend(self.embed(l, rng));
        }
        let query_label = labels[rng.gen_range(0..n)];
        let query = self.embed(query_label, rng);
        let y_index = brute_force_label_nn(&labels, query_label)?;
        Ok(NnInstance {
            n,
            d: self.d,
            y_value: data[y_index * self.d..(y_index + 1) * self.d].to_vec(),
            data,
            query,
            y_index,
            labels: Some(labels),
            query_label: Some(query_label),
        })
    }
}

pub fn sample_synthetic_rep_instance(l: usize, d: usize, n: usize, seed: u64) -> Result<NnInstance> {
    SyntheticRepSpace::new(l, d, SYNTHETIC_SIGMA).sample(n, &mut seeded(seed, &[0x7e9]))
}

/// Draws one instance with an explicit generator. Batch samplers use this
/// so that a single stream of randomness feeds many instances.
pub fn sample_nn_instance_with<R: Rng>(spec: &DistributionSpec, rng: &mut R) -> Result<NnInstance> {
    use DistributionKind::*;
    let (n, d) = (spec.n, spec.d);
    match spec.kind {
        Uniform1d | Uniform2d => {
            let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let query: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            NnInstance::new(n, d, data, query)
        }
        Zipf => {
            let k = spec.universe.unwrap_or(200);
            let data: Vec<f64> = index::sample(rng, k, n)
                .into_iter()
                .map(|i| (i + 1) as f64)
                .collect();
            let sampler = zipf_with(spec.alpha.unwrap_or(ZIPF_ALPHA), k, false, rng)?;
            let query = vec![sampler.sample(rng) as f64];
            NnInstance::new(n, 1, data, query)
        }
        Hard1d => {
            let data = hard_with(n, spec.a.unwrap_or(HARD_A), rng);
            let query = perturbed_query(&data, 1, 1.0, rng);
            NnInstance::new(n, 1, data, query)
        }
        Hard2d => {
            let a = spec.a.unwrap_or(HARD_A);
            let xs = hard_with(n, a, rng);
            let ys = hard_with(n, a, rng);
            let data: Vec<f64> = xs.iter().zip(&ys).flat_map(|(&x, &y)| [x, y]).collect();
            let query = perturbed_query(&data, 2, 1.0, rng);
            NnInstance::new(n, 2, data, query)
        }
        Hypersphere => {
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                data.extend(unit_vector(d, rng));
            }
            let target = rng.gen_range(0..n);
            let rho = spec.rho.unwrap_or(0.8);
            let query = query_at_inner_product(&data[target * d..(target + 1) * d], rho, rng);
            NnInstance::new(n, d, data, query)
        }
        SyntheticRep => {
            let l = spec.labels.unwrap_or(200);
            SyntheticRepSpace::new(l, d, SYNTHETIC_SIGMA).sample(n, rng)
        }
    }
}

pub fn sample_nn_instance(spec: &DistributionSpec, seed: u64) -> Result<NnInstance> {
    spec.validate()?;
    sample_nn_instance_with(spec, &mut seeded(seed, &[0x1457]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "count")]
pub enum QuerySchedule {
    /// One query at every timestep.
    EveryStep,
    /// `count` queries at uniformly random timesteps.
    Random(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub universe: usize,
    pub alpha: f64,
    pub permute_ranks: bool,
    pub schedule: QuerySchedule,
}

impl StreamSpec {
    pub fn zipf(universe: usize, alpha: f64) -> Self {
        Self {
            universe,
            alpha,
            permute_ranks: true,
            schedule: QuerySchedule::Random(8),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamQuery {
    pub element: usize,
    /// 1-based timestep; the query sees the first `t` updates.
    pub t: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamInstance {
    pub elements: Vec<usize>,
    pub queries: Vec<StreamQuery>,
}

impl StreamInstance {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn prefix_count(&self, element: usize, t: usize) -> usize {
        self.elements[..t].iter().filter(|&&e| e == element).count()
    }
}

pub fn gen_stream_with<R: Rng>(spec: &StreamSpec, t_len: usize, rng: &mut R) -> Result<StreamInstance> {
    if t_len == 0 {
        return input_err("stream length must be at least 1");
    }
    let sampler = zipf_with(spec.alpha, spec.universe, spec.permute_ranks, rng)?;
    let elements: Vec<usize> = (0..t_len).map(|_| sampler.sample(rng)).collect();
    let mut times: Vec<usize> = match spec.schedule {
        QuerySchedule::EveryStep => (1..=t_len).collect(),
        QuerySchedule::Random(c) => (0..c).map(|_| rng.gen_range(1..=t_len)).collect(),
    };
    times.sort_unstable();
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let mut queries = Vec::with_capacity(times.len());
    let mut seen = 0;
    for t in times {
        while seen < t {
            *counts.entry(elements[seen]).or_default() += 1;
            seen += 1;
        }
        let element = sampler.sample(rng);
        queries.push(StreamQuery {
            element,
            t,
            count: counts.get(&element).copied().unwrap_or(0),
        });
    }
    Ok(StreamInstance { elements, queries })
}

pub fn gen_stream(spec: &StreamSpec, t_len: usize, seed: u64) -> Result<StreamInstance> {
    gen_stream_with(spec, t_len, &mut seeded(seed, &[0x57e4]))
}

/// One line of an instance dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub spec: DistributionSpec,
    pub seed: u64,
    #[serde(rename = "D")]
    pub data: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub y_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_label: Option<usize>,
}

impl InstanceRecord {
    pub fn from_instance(spec: &DistributionSpec, seed: u64, inst: &NnInstance) -> Self {
        Self {
            spec: spec.clone(),
            seed,
            data: inst.data.chunks(inst.d).map(<[f64]>::to_vec).collect(),
            q: inst.query.clone(),
            y_index: inst.y_index,
            labels: inst.labels.clone(),
            query_label: inst.query_label,
        }
    }

    /// Rebuilds the instance and re-checks `y_index` with the oracle.
    pub fn to_instance(&self) -> Result<NnInstance> {
        let d = self.spec.d;
        if self.data.iter().any(|r| r.len() != d) || self.q.len() != d {
            return Err(Error::Integrity("record rows disagree with spec.d".into()));
        }
        let data: Vec<f64> = self.data.concat();
        let n = self.data.len();
        let inst = NnInstance {
            n,
            d,
            y_value: data
                .get(self.y_index * d..(self.y_index + 1) * d)
                .ok_or_else(|| Error::Integrity("y_index out of range".into()))?
                .to_vec(),
            data,
            query: self.q.clone(),
            y_index: self.y_index,
            labels: self.labels.clone(),
            query_label: self.query_label,
        };
        if inst.recompute_nn()? != self.y_index {
            return Err(Error::Integrity(format!(
                "stored y_index {} is not the nearest neighbor",
                self.y_index
            )));
        }
        Ok(inst)
    }
}

pub fn write_instances(path: impl AsRef<Path>, records: &[InstanceRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_instances(path: impl AsRef<Path>) -> Result<Vec<InstanceRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
