//! Classical comparators with the same lookup accounting as the learned
//! models: one unit per stored row read.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::squared_distance;
use crate::error::{input_err, Result};
use crate::trace::LookupTrace;

fn check_sorted(data: &[f64]) -> Result<()> {
    if data.is_empty() {
        return input_err("search needs a nonempty array");
    }
    if data.windows(2).any(|w| w[0] > w[1]) {
        return input_err("search needs an ascending array");
    }
    Ok(())
}

/// Bisection over an open bracket `(lo, hi)` that starts at `(-1, N)`. Each
/// probe at the ceiling midpoint is one lookup; the search ends when the
/// bracket closes, at which point both neighbors of `q` have been read.
pub fn binary_search_trace(data: &[f64], q: f64, m: usize) -> Result<LookupTrace> {
    check_sorted(data)?;
    let mut trace = LookupTrace::default();
    let (mut lo, mut hi) = (-1i64, data.len() as i64);
    while hi - lo > 1 && trace.len() < m {
        let mid = (lo + hi + 1).div_euclid(2);
        let v = data[mid as usize];
        trace.push(mid as usize, vec![v]);
        if v <= q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(trace)
}

/// Interpolated probes inside the unread interval `[lo, hi]`. The bracket
/// endpoint values used to interpolate are not charged.
pub fn interpolation_search_trace(data: &[f64], q: f64, m: usize) -> Result<LookupTrace> {
    check_sorted(data)?;
    let mut trace = LookupTrace::default();
    let (mut lo, mut hi) = (0i64, data.len() as i64 - 1);
    while lo <= hi && trace.len() < m {
        let (vlo, vhi) = (data[lo as usize], data[hi as usize]);
        let p = if vhi > vlo {
            let frac = (q - vlo) / (vhi - vlo);
            (lo + (frac * (hi - lo) as f64).round() as i64).clamp(lo, hi)
        } else {
            (lo + hi) / 2
        };
        let v = data[p as usize];
        trace.push(p as usize, vec![v]);
        if v == q {
            break;
        }
        if v < q {
            lo = p + 1;
        } else {
            hi = p - 1;
        }
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum KdNode {
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        point: usize,
    },
}

/// k-d tree with one point per leaf. Internal nodes split at the lower
/// median of the current dimension; dimensions cycle from the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdTree {
    pub d: usize,
    pub data: Vec<f64>,
    pub nodes: Vec<KdNode>,
    pub depth: usize,
    /// Leaf index of each leaf in left-to-right order.
    pub leaf_order: Vec<usize>,
}

pub fn kd_build(data: &[f64], d: usize) -> Result<KdTree> {
    if d == 0 || data.is_empty() || data.len() % d != 0 {
        return input_err("kd_build needs a nonempty N x d dataset");
    }
    let mut tree = KdTree {
        d,
        data: data.to_vec(),
        nodes: Vec::new(),
        depth: 0,
        leaf_order: Vec::new(),
    };
    let idx: Vec<usize> = (0..data.len() / d).collect();
    build_node(&mut tree, idx, 0);
    Ok(tree)
}

fn build_node(tree: &mut KdTree, mut idx: Vec<usize>, level: usize) -> usize {
    tree.depth = tree.depth.max(level);
    let slot = tree.nodes.len();
    if idx.len() == 1 {
        tree.nodes.push(KdNode::Leaf { point: idx[0] });
        tree.leaf_order.push(idx[0]);
        return slot;
    }
    let d = tree.d;
    let dim = level % d;
    idx.sort_by(|&a, &b| {
        tree.data[a * d + dim]
            .total_cmp(&tree.data[b * d + dim])
            .then(a.cmp(&b))
    });
    let mid = (idx.len() - 1) / 2;
    let value = tree.data[idx[mid] * d + dim];
    let right_idx = idx.split_off(mid + 1);
    tree.nodes.push(KdNode::Leaf { point: usize::MAX });
    let left = build_node(tree, idx, level + 1);
    let right = build_node(tree, right_idx, level + 1);
    tree.nodes[slot] = KdNode::Split {
        dim,
        value,
        left,
        right,
    };
    slot
}

impl KdTree {
    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Point indices in in-order (left-to-right leaf) order.
    pub fn in_order(&self) -> &[usize] {
        &self.leaf_order
    }
}

/// Depth-first NN search with backtracking; every leaf visited costs one
/// lookup and the search stops after `m` of them. Trace positions are point
/// indices.
pub fn kd_query(tree: &KdTree, q: &[f64], m: usize) -> Result<LookupTrace> {
    if q.len() != tree.d {
        return input_err(format!("query has {} coordinates, tree has {}", q.len(), tree.d));
    }
    let mut trace = LookupTrace::default();
    let mut best = (f64::INFINITY, usize::MAX);
    kd_visit(tree, 0, q, m, &mut best, &mut trace);
    Ok(trace)
}

fn kd_visit(
    tree: &KdTree,
    node: usize,
    q: &[f64],
    m: usize,
    best: &mut (f64, usize),
    trace: &mut LookupTrace,
) {
    if trace.len() >= m {
        return;
    }
    match tree.nodes[node] {
        KdNode::Leaf { point } => {
            let p = tree.point(point);
            let dist = squared_distance(p, q);
            trace.push(point, p.to_vec());
            if dist < best.0 || (dist == best.0 && point < best.1) {
                *best = (dist, point);
            }
        }
        KdNode::Split {
            dim,
            value,
            left,
            right,
        } => {
            let diff = q[dim] - value;
            let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
            kd_visit(tree, near, q, m, best, trace);
            // `<=` keeps equidistant points with smaller indices reachable
            if diff * diff <= best.0 {
                kd_visit(tree, far, q, m, best, trace);
            }
        }
    }
}

/// Random-hyperplane LSH with `2^K` equal-capacity buckets laid out
/// contiguously: bucket `b` owns slots `[b * cap, (b + 1) * cap)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LshTable {
    pub k: usize,
    pub d: usize,
    pub directions: Vec<f64>,
    pub capacity: usize,
    /// Point index stored in every slot.
    pub slots: Vec<usize>,
    pub data: Vec<f64>,
    /// Points placed outside their own bucket during build.
    pub displaced: usize,
}

impl LshTable {
    pub fn buckets(&self) -> usize {
        1 << self.k
    }

    /// Bit `i` of the code is set when the projection on direction `i` is
    /// nonnegative.
    pub fn hash(&self, v: &[f64]) -> usize {
        (0..self.k)
            .map(|i| {
                let r = &self.directions[i * self.d..(i + 1) * self.d];
                let dot: f64 = r.iter().zip(v).map(|(a, b)| a * b).sum();
                usize::from(dot >= 0.0) << i
            })
            .sum()
    }

    pub fn bucket(&self, b: usize) -> &[usize] {
        &self.slots[b * self.capacity..(b + 1) * self.capacity]
    }
}

pub fn lsh_build<R: Rng>(data: &[f64], d: usize, k: usize, rng: &mut R) -> Result<LshTable> {
    if d == 0 || data.is_empty() || data.len() % d != 0 {
        return input_err("lsh_build needs a nonempty N x d dataset");
    }
    let n = data.len() / d;
    let buckets = 1usize << k;
    if n % buckets != 0 {
        return input_err(format!(
            "lsh_build: 2^K = {buckets} must divide N = {n}; pick K with 2^K | N"
        ));
    }
    let directions = (0..k * d).map(|_| rng.sample(StandardNormal)).collect();
    let mut table = LshTable {
        k,
        d,
        directions,
        capacity: n / buckets,
        slots: vec![usize::MAX; n],
        data: data.to_vec(),
        displaced: 0,
    };
    let mut fill = vec![0usize; buckets];
    for i in 0..n {
        let mut b = table.hash(&data[i * d..(i + 1) * d]);
        if fill[b] == table.capacity {
            let vacant: Vec<usize> = (0..buckets).filter(|&c| fill[c] < table.capacity).collect();
            b = vacant[rng.gen_range(0..vacant.len())];
            table.displaced += 1;
        }
        table.slots[b * table.capacity + fill[b]] = i;
        fill[b] += 1;
    }
    Ok(table)
}

/// Reads the first `m` slots of the query's bucket; if the bucket is smaller
/// than `m`, the rest are random slots from other buckets. Positions are slot
/// indices.
pub fn lsh_query<R: Rng>(table: &LshTable, q: &[f64], m: usize, rng: &mut R) -> Result<LshResult> {
    if q.len() != table.d || m == 0 {
        return input_err("lsh_query needs a d-dimensional query and M >= 1");
    }
    let b = table.hash(q);
    let start = b * table.capacity;
    let mut slots: Vec<usize> = (start..start + table.capacity.min(m)).collect();
    let need = m.saturating_sub(slots.len());
    let others = table.slots.len() - table.capacity;
    if need > 0 && others > 0 {
        for j in index::sample(rng, others, need.min(others)) {
            slots.push(if j < start { j } else { j + table.capacity });
        }
    }
    let mut trace = LookupTrace::default();
    for s in slots {
        let p = table.slots[s];
        trace.push(s, table.data[p * table.d..(p + 1) * table.d].to_vec());
    }
    let best = *crate::trace::best_so_far(&trace.values, q).last().unwrap();
    Ok(LshResult {
        best_point: table.slots[trace.positions[best]],
        trace,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LshResult {
    pub trace: LookupTrace,
    pub best_point: usize,
}

/// `[-1, 1]` cut into `T` equal buckets, each storing the point nearest its
/// midpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket1d {
    pub stored: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn bucket1d_build(data: &[f64], t: usize) -> Result<Bucket1d> {
    if data.is_empty() || t == 0 {
        return input_err("bucket1d needs data and T >= 1");
    }
    let stored = (0..t)
        .map(|i| {
            let mid = -1.0 + (2.0 * i as f64 + 1.0) / t as f64;
            let mut best = 0;
            for (j, &x) in data.iter().enumerate() {
                if (x - mid).abs() < (data[best] - mid).abs() {
                    best = j;
                }
            }
            best
        })
        .collect();
    Ok(Bucket1d {
        stored,
        data: data.to_vec(),
    })
}

impl Bucket1d {
    pub fn bucket_of(&self, q: f64) -> usize {
        let t = self.stored.len();
        (((q + 1.0) / 2.0 * t as f64).floor().max(0.0) as usize).min(t - 1)
    }
}

/// Index of the point stored in the query's bucket.
pub fn bucket1d_query(s: &Bucket1d, q: f64) -> usize {
    s.stored[s.bucket_of(q)]
}

/// Seeded multiply-shift hash onto `[0, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiplyShift {
    pub a: u64,
    pub b: u64,
}

impl MultiplyShift {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            a: rng.gen::<u64>() | 1,
            b: rng.gen(),
        }
    }

    pub fn hash(&self, x: u64, w: usize) -> usize {
        let h = self.a.wrapping_mul(x).wrapping_add(self.b) >> 32;
        ((h * w as u64) >> 32) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountMinSketch {
    pub width: usize,
    pub depth: usize,
    pub delta: f64,
    pub hashes: Vec<MultiplyShift>,
    /// Row-major `depth x width`.
    pub counters: Vec<f64>,
}

impl CountMinSketch {
    pub fn new<R: Rng>(width: usize, depth: usize, delta: f64, rng: &mut R) -> Result<Self> {
        if width == 0 || depth == 0 {
            return input_err("count-min sketch needs w >= 1 and d >= 1");
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return input_err(format!("count-min delta must be positive, got {delta}"));
        }
        Ok(Self {
            width,
            depth,
            delta,
            hashes: (0..depth).map(|_| MultiplyShift::random(rng)).collect(),
            counters: vec![0.0; width * depth],
        })
    }

    pub fn memory(&self) -> usize {
        self.counters.len()
    }

    /// Flat counter index touched by `element` in row `row`.
    pub fn position(&self, row: usize, element: usize) -> usize {
        row * self.width + self.hashes[row].hash(element as u64, self.width)
    }

    pub fn update(&mut self, element: usize) {
        for r in 0..self.depth {
            let p = self.position(r, element);
            self.counters[p] += self.delta;
        }
    }

    pub fn query(&self, element: usize) -> f64 {
        (0..self.depth)
            .map(|r| self.counters[self.position(r, element)])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn reset(&mut self) {
        self.counters.iter_mut().for_each(|c| *c = 0.0);
    }
}

pub fn cms_update(sketch: &mut CountMinSketch, element: usize) {
    sketch.update(element);
}

pub fn cms_query(sketch: &CountMinSketch, element: usize) -> f64 {
    sketch.query(element)
}
