//! Lookup traces and per-lookup scoring shared by the learned models and the
//! classical baselines.

use serde::{Deserialize, Serialize};

use crate::datagen::squared_distance;

/// The rows a query procedure retrieved, in order. `positions` index the
/// structure's own storage (sorted array, tree leaves, bucket slots).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LookupTrace {
    pub positions: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl LookupTrace {
    pub fn push(&mut self, position: usize, value: Vec<f64>) {
        self.positions.push(position);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Best-so-far value after each of `m` lookups. A trace that stopped
    /// early carries its last best forward; lookups before the first one
    /// never happen because every procedure makes at least one.
    pub fn best_values(&self, query: &[f64], m: usize) -> Vec<Vec<f64>> {
        let idx = best_so_far(&self.values, query);
        (0..m)
            .map(|i| self.values[idx[i.min(idx.len() - 1)]].clone())
            .collect()
    }
}

/// Running argmin of distance to `query`; ties keep the earlier lookup.
pub fn best_so_far(values: &[Vec<f64>], query: &[f64]) -> Vec<usize> {
    let mut out = Vec::with_capacity(values.len());
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if squared_distance(v, query) < squared_distance(&values[best], query) {
            best = i;
        }
        out.push(best);
    }
    out
}

/// Per-lookup accuracy and squared error accumulated over instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookupStats {
    pub hits: Vec<u64>,
    pub sq_err: Vec<f64>,
    pub count: u64,
}

impl LookupStats {
    pub fn new(m: usize) -> Self {
        Self {
            hits: vec![0; m],
            sq_err: vec![0.0; m],
            count: 0,
        }
    }

    pub fn lookups(&self) -> usize {
        self.hits.len()
    }

    /// Scores a sequence of best-so-far values against the true neighbor.
    pub fn record(&mut self, best: &[Vec<f64>], y_value: &[f64]) {
        for (i, v) in best.iter().enumerate().take(self.hits.len()) {
            if v.as_slice() == y_value {
                self.hits[i] += 1;
            }
            self.sq_err[i] += squared_distance(v, y_value);
        }
        self.count += 1;
    }

    pub fn record_trace(&mut self, trace: &LookupTrace, query: &[f64], y_value: &[f64]) {
        let best = trace.best_values(query, self.hits.len());
        self.record(&best, y_value);
    }

    pub fn accuracy(&self) -> Vec<f64> {
        self.hits
            .iter()
            .map(|&h| h as f64 / self.count.max(1) as f64)
            .collect()
    }

    pub fn mse(&self) -> Vec<f64> {
        self.sq_err
            .iter()
            .map(|&s| s / self.count.max(1) as f64)
            .collect()
    }

    pub fn merge(&mut self, other: &LookupStats) {
        for (a, b) in self.hits.iter_mut().zip(&other.hits) {
            *a += b;
        }
        for (a, b) in self.sq_err.iter_mut().zip(&other.sq_err) {
            *a += b;
        }
        self.count += other.count;
    }
}
