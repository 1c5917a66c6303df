//! Read-only instruments for trained models: where lookups land, how the
//! learned order arranges space, what the extra tokens store, how queries
//! are partitioned, and where the frequency model writes each element.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::NnInstance;
use crate::error::{input_err, Result};
use crate::freqest::FreqNets;
use crate::nn_model::{Mode, NnModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookupHistogram {
    /// Zero-based lookup index the histogram describes.
    pub step: usize,
    pub positions: usize,
    /// Upper edges of the query-value quantile bins (first coordinate).
    pub bin_edges: Vec<f64>,
    /// `bins x positions`, each row a distribution.
    pub by_bin: Vec<Vec<f64>>,
    pub overall: Vec<f64>,
    pub instances: usize,
}

impl LookupHistogram {
    /// Most frequent position; ties go to the smaller one.
    pub fn mode(&self) -> usize {
        crate::diffsort::argmax(&self.overall)
    }
}

/// Builds a histogram from observed positions and the query key of each
/// observation, binning keys into `bins` equal-count quantile groups.
pub fn histogram_from_positions(
    step: usize,
    n_positions: usize,
    positions: &[usize],
    keys: &[f64],
    bins: usize,
) -> Result<LookupHistogram> {
    if positions.is_empty() || positions.len() != keys.len() {
        return input_err("histogram needs one key per observed position");
    }
    if bins == 0 || n_positions == 0 {
        return input_err("histogram needs at least one bin and one position");
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= n_positions) {
        return input_err(format!("position {p} outside 0..{n_positions}"));
    }
    let mut sorted = keys.to_vec();
    sorted.sort_by(f64::total_cmp);
    let bin_edges: Vec<f64> = (1..=bins)
        .map(|b| sorted[(b * sorted.len()).div_ceil(bins) - 1])
        .collect();
    let mut by_bin = vec![vec![0.0; n_positions]; bins];
    let mut overall = vec![0.0; n_positions];
    for (&p, &k) in positions.iter().zip(keys) {
        let b = bin_edges.iter().position(|&e| k <= e).unwrap_or(bins - 1);
        by_bin[b][p] += 1.0;
        overall[p] += 1.0;
    }
    for row in by_bin.iter_mut().chain(std::iter::once(&mut overall)) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(LookupHistogram {
        step,
        positions: n_positions,
        bin_edges,
        by_bin,
        overall,
        instances: positions.len(),
    })
}

/// Hard-mode lookup positions of query model `step` over `instances`.
pub fn lookup_histogram(model: &NnModel, instances: &[NnInstance], step: usize, bins: usize) -> Result<LookupHistogram> {
    if step >= model.config.lookups {
        return input_err(format!("step {step} exceeds the lookup budget {}", model.config.lookups));
    }
    let mut positions = Vec::with_capacity(instances.len());
    let mut keys = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(crate::eval::EVAL_BATCH) {
        let refs: Vec<&NnInstance> = chunk.iter().collect();
        for (inst, t) in chunk.iter().zip(model.run_batch(&refs)?) {
            positions.push(t.trace.positions[step]);
            keys.push(inst.query[0]);
        }
    }
    histogram_from_positions(step, model.config.rows(), &positions, &keys, bins)
}

/// Binary-search lookup positions for the same histogram shape.
pub fn binary_search_histogram(instances: &[NnInstance], step: usize, bins: usize) -> Result<LookupHistogram> {
    let n = instances.first().map_or(0, |i| i.n);
    let mut positions = Vec::new();
    let mut keys = Vec::new();
    for inst in instances {
        let mut sorted = inst.data.clone();
        sorted.sort_by(f64::total_cmp);
        let t = crate::baselines::binary_search_trace(&sorted, inst.query[0], step + 1)?;
        if let Some(&p) = t.positions.get(step) {
            positions.push(p);
            keys.push(inst.query[0]);
        }
    }
    histogram_from_positions(step, n, &positions, &keys, bins)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyDistanceMatrix {
    pub n: usize,
    pub d: usize,
    /// One row-major `n x n` matrix per dimension.
    pub per_dim: Vec<Vec<f64>>,
    /// Row-major `n x n` Euclidean distances.
    pub combined: Vec<f64>,
}

impl AdjacencyDistanceMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.combined[i * self.n + j]
    }
}

/// Mean pairwise distances between the points stored at each pair of
/// positions, where `orders[b][p]` is the index of the point instance `b`
/// stores at position `p`.
pub fn adjacency_from_orders(instances: &[NnInstance], orders: &[Vec<usize>]) -> Result<AdjacencyDistanceMatrix> {
    let Some(first) = instances.first() else {
        return input_err("adjacency matrix needs at least one instance");
    };
    let (n, d) = (first.n, first.d);
    if orders.len() != instances.len() || orders.iter().any(|o| o.len() != n) {
        return input_err("one order of length N per instance is required");
    }
    let mut per_dim = vec![vec![0.0; n * n]; d];
    let mut combined = vec![0.0; n * n];
    for (inst, order) in instances.iter().zip(orders) {
        if inst.n != n || inst.d != d {
            return input_err("instances disagree on N or d");
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (inst.point(order[i]), inst.point(order[j]));
                let mut sq = 0.0;
                for k in 0..d {
                    let diff = (a[k] - b[k]).abs();
                    per_dim[k][i * n + j] += diff;
                    per_dim[k][j * n + i] += diff;
                    sq += diff * diff;
                }
                combined[i * n + j] += sq.sqrt();
                combined[j * n + i] += sq.sqrt();
            }
        }
    }
    let inv = 1.0 / instances.len() as f64;
    for m in per_dim.iter_mut().chain(std::iter::once(&mut combined)) {
        m.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(AdjacencyDistanceMatrix { n, d, per_dim, combined })
}

/// Distance matrix of the model's learned order.
pub fn adjacency_distance_matrix(model: &NnModel, instances: &[NnInstance]) -> Result<AdjacencyDistanceMatrix> {
    if !model.config.permute {
        return input_err("the model does not permute its input");
    }
    let mut orders = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(crate::eval::EVAL_BATCH) {
        let refs: Vec<&NnInstance> = chunk.iter().collect();
        for (s, _) in model.build_structures(&refs, Mode::Eval)? {
            orders.push(s.order.expect("hard mode records the order"));
        }
    }
    adjacency_from_orders(instances, &orders)
}

/// Reference matrix for the k-d tree's in-order leaf arrangement.
pub fn kd_adjacency_matrix(instances: &[NnInstance]) -> Result<AdjacencyDistanceMatrix> {
    let orders = instances
        .iter()
        .map(|i| Ok(crate::baselines::kd_build(&i.data, i.d)?.in_order().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    adjacency_from_orders(instances, &orders)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares with an intercept via Householder QR. `x` holds one
/// feature row per observation.
pub fn ols(x: &[Vec<f64>], y: &[f64]) -> Result<OlsFit> {
    let rows = x.len();
    let p = x.first().map_or(0, Vec::len);
    let cols = p + 1;
    if rows != y.len() || x.iter().any(|r| r.len() != p) {
        return input_err("regression needs one response per feature row of equal width");
    }
    if rows < cols {
        return input_err(format!(
            "{rows} observations cannot determine {cols} coefficients; use at least {cols} instances"
        ));
    }
    // column-major design with the intercept column last
    let mut a = vec![0.0; rows * cols];
    for (i, r) in x.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            a[j * rows + i] = *v;
        }
        a[p * rows + i] = 1.0;
    }
    let mut b = y.to_vec();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for k in 0..cols {
        let col = &mut a[k * rows..(k + 1) * rows];
        let norm = col[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 * scale * (rows as f64).sqrt() {
            return input_err("design matrix is rank deficient; use more or more varied instances");
        }
        let alpha = if col[k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = col[k..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        for j in k..cols {
            let c = &mut a[j * rows + k..(j + 1) * rows];
            let dot: f64 = v.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
            let f = 2.0 * dot / vnorm2;
            c.iter_mut().zip(&v).for_each(|(ci, vi)| *ci -= f * vi);
        }
        let dot: f64 = v.iter().zip(&b[k..]).map(|(a, b)| a * b).sum();
        let f = 2.0 * dot / vnorm2;
        b[k..].iter_mut().zip(&v).for_each(|(bi, vi)| *bi -= f * vi);
    }
    let mut beta = vec![0.0; cols];
    for k in (0..cols).rev() {
        let s: f64 = ((k + 1)..cols).map(|j| a[j * rows + k] * beta[j]).sum();
        beta[k] = (b[k] - s) / a[k * rows + k];
    }
    let mean = y.iter().sum::<f64>() / rows as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (r, &yi) in x.iter().zip(y) {
        let pred = beta[p] + r.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
        ss_res += (yi - pred).powi(2);
        ss_tot += (yi - mean).powi(2);
    }
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(OlsFit {
        intercept: beta[p],
        coefficients: beta[..p].to_vec(),
        r2,
    })
}

/// Regresses each extra token's stored value on the sorted inputs of its
/// instance. One fit per token.
pub fn extra_space_regression(model: &NnModel, instances: &[NnInstance]) -> Result<Vec<OlsFit>> {
    let c = &model.config;
    if c.extra_tokens == 0 {
        return input_err("the model has no extra tokens");
    }
    if c.d != 1 {
        return input_err("extra-space regression applies to 1D data");
    }
    if instances.len() < c.n + 1 {
        return input_err(format!(
            "{} instances cannot determine {} coefficients; use at least {}",
            instances.len(),
            c.n + 1,
            c.n + 1
        ));
    }
    let mut features = Vec::with_capacity(instances.len());
    let mut tokens = vec![Vec::with_capacity(instances.len()); c.extra_tokens];
    for chunk in instances.chunks(crate::eval::EVAL_BATCH) {
        let refs: Vec<&NnInstance> = chunk.iter().collect();
        for (inst, (s, _)) in chunk.iter().zip(model.build_structures(&refs, Mode::Eval)?) {
            let mut sorted = inst.data.clone();
            sorted.sort_by(f64::total_cmp);
            features.push(sorted);
            for (t, col) in tokens.iter_mut().enumerate() {
                col.push(s.rows[c.n + t]);
            }
        }
    }
    tokens.iter().map(|y| ols(&features, y)).collect()
}

/// Full-batch gradient descent settings for the one-vs-rest classifiers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticSettings {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for LogisticSettings {
    fn default() -> Self {
        Self {
            iterations: 5000,
            lr: 0.1,
            l2: 1e-4,
        }
    }
}

/// Weights and bias of one binary logistic classifier.
pub fn fit_logistic(x: &[Vec<f64>], labels: &[bool], s: LogisticSettings) -> (Vec<f64>, f64) {
    let d = x.first().map_or(0, Vec::len);
    let n = x.len() as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut gw = vec![0.0; d];
    for _ in 0..s.iterations {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(labels) {
            let z = b + xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - f64::from(u8::from(yi));
            gw.iter_mut().zip(xi).for_each(|(g, v)| *g += err * v);
            gb += err;
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= s.lr * (g / n + s.l2 * *wj);
        }
        b -= s.lr * gb / n;
    }
    (w, b)
}

/// Top eigenpairs of a symmetric matrix by orthogonal iteration.
pub fn top_eigen(matrix: &[f64], n: usize, k: usize, tol: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if matrix.len() != n * n || k == 0 || k > n {
        return input_err("top_eigen needs an n x n matrix and 1 <= k <= n");
    }
    // deterministic, non-degenerate start
    let mut q: Vec<Vec<f64>> = (0..k)
        .map(|c| (0..n).map(|i| if i == c { 1.0 } else { 0.01 * ((i * 7 + c * 3) % 11) as f64 }).collect())
        .collect();
    orthonormalize(&mut q);
    let matvec = |v: &[f64]| -> Vec<f64> {
        (0..n).map(|i| (0..n).map(|j| matrix[i * n + j] * v[j]).sum()).collect()
    };
    let mut vals = vec![0.0; k];
    for _ in 0..100_000 {
        let mut z: Vec<Vec<f64>> = q.iter().map(|v| matvec(v)).collect();
        orthonormalize(&mut z);
        let change = q
            .iter()
            .zip(&z)
            .map(|(a, b)| {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                1.0 - dot.abs()
            })
            .fold(0.0, f64::max);
        q = z;
        if change < tol {
            break;
        }
    }
    for (v, val) in q.iter_mut().zip(vals.iter_mut()) {
        let av = matvec(v);
        *val = v.iter().zip(&av).map(|(a, b)| a * b).sum();
        // sign convention: largest-magnitude entry positive
        let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok((vals, q))
}

fn orthonormalize(vs: &mut [Vec<f64>]) {
    for i in 0..vs.len() {
        for j in 0..i {
            let dot: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
            let vj = vs[j].clone();
            vs[i].iter_mut().zip(&vj).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = vs[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            vs[i].iter_mut().for_each(|x| *x /= norm);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Share of total variance captured by each returned component.
    pub explained: Vec<f64>,
}

impl Pca {
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(v).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }
}

/// Principal components of the rows of `data` (centered, population
/// covariance).
pub fn pca(data: &[Vec<f64>], k: usize) -> Result<Pca> {
    let d = data.first().map_or(0, Vec::len);
    if data.len() < 2 || d == 0 {
        return input_err("PCA needs at least two rows");
    }
    let n = data.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = vec![0.0; d * d];
    for r in data {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let (eigenvalues, components) = top_eigen(&cov, d, k.min(d), 1e-10)?;
    let explained = eigenvalues
        .iter()
        .map(|v| if trace > 0.0 { v / trace } else { 0.0 })
        .collect();
    Ok(Pca {
        mean,
        components,
        eigenvalues,
        explained,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionProbe {
    /// Positions that received a classifier, in increasing order.
    pub positions: Vec<usize>,
    /// Positions never chosen by the model; their classifiers are skipped.
    pub skipped: Vec<usize>,
    pub coefficients: Vec<Vec<f64>>,
    pub pca: Pca,
    /// `(projection, assigned position)` for each query.
    pub queries: Vec<(Vec<f64>, usize)>,
    /// `(projection, sorted position)` for the points of one instance.
    pub data: Vec<(Vec<f64>, usize)>,
}

/// Fits one classifier per observed position from query vectors to the
/// position chosen for them, then projects queries and points onto the top
/// two principal components of the stacked coefficients.
pub fn partition_from_assignments(
    queries: &[Vec<f64>],
    assigned: &[usize],
    n_positions: usize,
    points: &[(Vec<f64>, usize)],
    settings: LogisticSettings,
) -> Result<PartitionProbe> {
    if queries.is_empty() || queries.len() != assigned.len() {
        return input_err("one assigned position per query is required");
    }
    let mut positions = Vec::new();
    let mut skipped = Vec::new();
    let mut coefficients = Vec::new();
    for p in 0..n_positions {
        let labels: Vec<bool> = assigned.iter().map(|&a| a == p).collect();
        if !labels.iter().any(|&l| l) {
            skipped.push(p);
            continue;
        }
        let (w, _) = fit_logistic(queries, &labels, settings);
        positions.push(p);
        coefficients.push(w);
    }
    if coefficients.len() < 2 {
        return input_err("fewer than two positions were ever chosen");
    }
    let pca = pca(&coefficients, 2)?;
    Ok(PartitionProbe {
        queries: queries.iter().zip(assigned).map(|(q, &a)| (pca.project(q), a)).collect(),
        data: points.iter().map(|(x, p)| (pca.project(x), *p)).collect(),
        positions,
        skipped,
        coefficients,
        pca,
    })
}

/// Partition probe for the first query model of a trained checkpoint.
pub fn partition_probe(model: &NnModel, instances: &[NnInstance], settings: LogisticSettings) -> Result<PartitionProbe> {
    let mut queries = Vec::with_capacity(instances.len());
    let mut assigned = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(crate::eval::EVAL_BATCH) {
        let refs: Vec<&NnInstance> = chunk.iter().collect();
        for (inst, t) in chunk.iter().zip(model.run_batch(&refs)?) {
            queries.push(inst.query.clone());
            assigned.push(t.trace.positions[0]);
        }
    }
    let points = match instances.first() {
        Some(inst) if model.config.permute => {
            let (s, _) = model.build_structure(inst, Mode::Eval)?;
            let order = s.order.expect("hard mode records the order");
            order.iter().enumerate().map(|(p, &i)| (inst.point(i).to_vec(), p)).collect()
        }
        _ => Vec::new(),
    };
    partition_from_assignments(&queries, &assigned, model.config.rows(), &points, settings)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub element: usize,
    pub positions: Vec<usize>,
    pub values: Vec<f64>,
    /// No other element writes to any of this element's positions.
    pub dedicated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryMap {
    pub entries: Vec<MemoryEntry>,
    /// Mean update value over all elements and writes.
    pub mean_delta: f64,
    pub dedicated: usize,
}

/// Eval-mode update positions and values of every universe element.
pub fn freq_memory_map(nets: &FreqNets) -> Result<MemoryMap> {
    let mut rng = crate::rng::seeded(0, &[crate::rng::tag::PROBE]);
    let mut entries = Vec::with_capacity(nets.universe());
    for e in 1..=nets.universe() {
        let plan = nets.update_plan(e, Mode::Eval, &mut rng)?;
        let positions = plan.positions.iter().map(|u| crate::diffsort::argmax(u)).collect();
        entries.push(MemoryEntry {
            element: e,
            positions,
            values: plan.values,
            dedicated: false,
        });
    }
    let mut users: HashMap<usize, usize> = HashMap::new();
    for en in &entries {
        let mut own = en.positions.clone();
        own.sort_unstable();
        own.dedup();
        for p in own {
            *users.entry(p).or_default() += 1;
        }
    }
    for en in &mut entries {
        en.dedicated = en.positions.iter().all(|p| users[p] == 1);
    }
    let writes: Vec<f64> = entries.iter().flat_map(|e| e.values.iter().copied()).collect();
    Ok(MemoryMap {
        mean_delta: writes.iter().sum::<f64>() / writes.len() as f64,
        dedicated: entries.iter().filter(|e| e.dedicated).count(),
        entries,
    })
}

pub fn matrix_csv(rows: usize, cols: usize, data: &[f64]) -> String {
    let mut s = String::new();
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols].iter().map(|v| format!("{v}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Grayscale heatmap, darker for smaller values.
pub fn svg_heatmap(rows: usize, cols: usize, data: &[f64], cell: f64) -> String {
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}">"#,
        cols as f64 * cell,
        rows as f64 * cell
    );
    for r in 0..rows {
        for c in 0..cols {
            let g = (255.0 * (data[r * cols + c] - lo) / span).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})"/>"#,
                c as f64 * cell,
                r as f64 * cell
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter plot of labeled 2D points, one hue per label; points are drawn
/// as small squares.
pub fn svg_scatter(points: &[(f64, f64, usize)], size: f64) -> String {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y, _) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let sx = if x1 > x0 { x1 - x0 } else { 1.0 };
    let sy = if y1 > y0 { y1 - y0 } else { 1.0 };
    let labels = points.iter().map(|p| p.2).max().map_or(1, |m| m + 1);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">"#);
    for &(x, y, l) in points {
        let px = 5.0 + (size - 10.0) * (x - x0) / sx;
        let py = 5.0 + (size - 10.0) * (1.0 - (y - y0) / sy);
        let hue = 360.0 * l as f64 / labels as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="3" height="3" fill="hsl({hue:.0},70%,45%)"/>"#,
            px - 1.5,
            py - 1.5
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Line chart of one or more series sharing an x axis, as SVG paths.
pub fn svg_lines(series: &[Vec<f64>], width: f64, height: f64) -> String {
    let all = series.iter().flatten().filter(|v| v.is_finite());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">"#);
    for (i, ys) in series.iter().enumerate() {
        let n = ys.len().max(2) - 1;
        let mut d = String::new();
        for (j, y) in ys.iter().enumerate().filter(|(_, y)| y.is_finite()) {
            let px = 5.0 + (width - 10.0) * j as f64 / n as f64;
            let py = 5.0 + (height - 10.0) * (1.0 - (y - lo) / span);
            let _ = write!(d, "{}{px:.2},{py:.2} ", if d.is_empty() { "M" } else { "L" });
        }
        let hue = 360.0 * i as f64 / series.len() as f64;
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="hsl({hue:.0},70%,40%)"/>"#, d.trim_end());
    }
    s.push_str("</svg>\n");
    s
}
