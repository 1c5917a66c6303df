//! Hard-mode evaluation of learned models and baselines.

use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{binary_search_trace, interpolation_search_trace, kd_build, kd_query, lsh_build, lsh_query};
use crate::datagen::{sample_nn_instance_with, DistributionSpec, NnInstance};
use crate::diffsort::argsort;
use crate::error::{input_err, Result};
use crate::nn_model::NnModel;
use crate::rng::{seeded, tag};
use crate::trace::{LookupStats, LookupTrace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub lookups: usize,
    /// `None` when accuracy is not meaningful (the sort-free ablation).
    pub accuracy: Option<Vec<f64>>,
    pub mse: Vec<f64>,
    pub sortedness: Option<f64>,
    pub instances: usize,
    pub wall_clock_s: f64,
}

impl EvalReport {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.accuracy.as_ref().and_then(|a| a.last().copied())
    }

    /// Lookup indices (1-based) where accuracy drops or MSE rises.
    pub fn monotonicity_violations(&self) -> Vec<usize> {
        let mut bad = Vec::new();
        if let Some(acc) = &self.accuracy {
            bad.extend(acc.windows(2).enumerate().filter(|(_, w)| w[1] < w[0]).map(|(i, _)| i + 2));
        }
        bad.extend(self.mse.windows(2).enumerate().filter(|(_, w)| w[1] > w[0]).map(|(i, _)| i + 2));
        bad.sort_unstable();
        bad.dedup();
        bad
    }

    fn from_stats(method: &str, stats: &LookupStats, with_accuracy: bool, sortedness: Option<f64>, started: Instant) -> Self {
        Self {
            method: method.to_string(),
            lookups: stats.lookups(),
            accuracy: with_accuracy.then(|| stats.accuracy()),
            mse: stats.mse(),
            sortedness,
            instances: stats.count as usize,
            wall_clock_s: started.elapsed().as_secs_f64(),
        }
    }
}

/// Deterministic evaluation suite: `count` instances from one seeded stream.
pub fn eval_instances(spec: &DistributionSpec, count: usize, seed: u64) -> Result<Vec<NnInstance>> {
    spec.validate()?;
    let mut rng = seeded(seed, &[tag::EVAL]);
    (0..count).map(|_| sample_nn_instance_with(spec, &mut rng)).collect()
}

/// Fraction of output positions of a hard permutation holding the right
/// value in ascending order.
pub fn order_sortedness(order: &[usize], values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let hits = order.iter().zip(&sorted).filter(|(&j, &s)| values[j] == s).count();
    hits as f64 / values.len() as f64
}

pub const EVAL_BATCH: usize = 256;

pub fn evaluate_model(model: &NnModel, instances: &[NnInstance]) -> Result<EvalReport> {
    let started = Instant::now();
    let c = &model.config;
    let mut stats = LookupStats::new(c.lookups);
    let mut sorted_sum = 0.0;
    for chunk in instances.chunks(EVAL_BATCH) {
        let refs: Vec<&NnInstance> = chunk.iter().collect();
        let traces = model.run_batch(&refs)?;
        for (inst, t) in chunk.iter().zip(&traces) {
            stats.record_trace(&t.trace, &inst.query, &inst.y_value);
            if let Some(order) = &t.order {
                if c.d == 1 {
                    sorted_sum += order_sortedness(order, &inst.data);
                }
            }
        }
    }
    let sortedness = (c.permute && c.d == 1).then(|| sorted_sum / instances.len().max(1) as f64);
    Ok(EvalReport::from_stats("e2e", &stats, c.permute, sortedness, started))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Binary,
    Interpolation,
    KdTree,
    Lsh,
    Random,
}

impl BaselineKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "binary" => Self::Binary,
            "interpolation" => Self::Interpolation,
            "kd_tree" | "kdtree" => Self::KdTree,
            "lsh" => Self::Lsh,
            "random" => Self::Random,
            other => return input_err(format!("unknown baseline '{other}'")),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Binary => "binary",
            Self::Interpolation => "interpolation",
            Self::KdTree => "kd_tree",
            Self::Lsh => "lsh",
            Self::Random => "random",
        }
    }

    pub fn applies_to(self, d: usize) -> bool {
        match self {
            Self::Binary | Self::Interpolation => d == 1,
            _ => true,
        }
    }
}

/// `m` distinct uniformly random rows.
pub fn random_trace<R: rand::Rng>(inst: &NnInstance, m: usize, rng: &mut R) -> LookupTrace {
    let mut t = LookupTrace::default();
    for j in index::sample(rng, inst.n, m.min(inst.n)) {
        t.push(j, inst.point(j).to_vec());
    }
    t
}

/// Largest `K` with `2^K` dividing `N` and buckets of at least `M` slots,
/// falling back to a single bucket.
pub fn default_lsh_bits(n: usize, m: usize) -> usize {
    let mut k = 0;
    while n % (1 << (k + 1)) == 0 && n >> (k + 1) >= m {
        k += 1;
    }
    k
}

pub fn evaluate_baseline(kind: BaselineKind, instances: &[NnInstance], m: usize, seed: u64) -> Result<EvalReport> {
    let started = Instant::now();
    let mut stats = LookupStats::new(m);
    let mut rng = seeded(seed, &[tag::BASELINE]);
    for inst in instances {
        if !kind.applies_to(inst.d) {
            return input_err(format!("{} search needs 1D data", kind.name()));
        }
        let trace = match kind {
            BaselineKind::Binary | BaselineKind::Interpolation => {
                let order = argsort(&inst.data);
                let sorted: Vec<f64> = order.iter().map(|&j| inst.data[j]).collect();
                let q = inst.query[0];
                if kind == BaselineKind::Binary {
                    binary_search_trace(&sorted, q, m)?
                } else {
                    interpolation_search_trace(&sorted, q, m)?
                }
            }
            BaselineKind::KdTree => kd_query(&kd_build(&inst.data, inst.d)?, &inst.query, m)?,
            BaselineKind::Lsh => {
                let table = lsh_build(&inst.data, inst.d, default_lsh_bits(inst.n, m), &mut rng)?;
                lsh_query(&table, &inst.query, m, &mut rng)?.trace
            }
            BaselineKind::Random => random_trace(inst, m, &mut rng),
        };
        stats.record_trace(&trace, &inst.query, &inst.y_value);
    }
    Ok(EvalReport::from_stats(kind.name(), &stats, true, None, started))
}

/// Percentile bootstrap interval for the mean of paired differences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

impl BootstrapCi {
    pub fn excludes_zero(&self) -> bool {
        self.lo > 0.0 || self.hi < 0.0
    }
}

/// Resamples the pairs `(a_i, b_i)` with replacement and reports the
/// central `level` interval of `mean(a - b)`.
pub fn paired_bootstrap_ci(a: &[f64], b: &[f64], resamples: usize, level: f64, seed: u64) -> Result<BootstrapCi> {
    if a.is_empty() || a.len() != b.len() {
        return input_err("bootstrap needs two nonempty samples of equal length");
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return input_err("bootstrap needs at least one resample and a level in (0, 1)");
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let mut rng = seeded(seed, &[tag::EVAL, 0xb007]);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| diffs[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let idx = |p: f64| ((p * resamples as f64).floor() as usize).min(resamples - 1);
    Ok(BootstrapCi {
        mean: diffs.iter().sum::<f64>() / n as f64,
        lo: means[idx(tail)],
        hi: means[idx(1.0 - tail)],
        level,
    })
}
