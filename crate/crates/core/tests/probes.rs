use learnds::baselines::CountMinSketch;
use learnds::datagen::DistributionSpec;
use learnds::eval::eval_instances;
use learnds::freqest::{CmsEmulation, FreqNets};
use learnds::nn_model::{ModelConfig, NnModel};
use learnds::probes::*;
use learnds::rng::seeded;
use learnds_autodiff::Checkpoint;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use sha2::{Digest, Sha256};

fn tiny_model(n: usize, d: usize, m: usize, extra: usize) -> NnModel {
    let mut c = ModelConfig::desk(n, d, m);
    c.width = 8;
    c.heads = 2;
    c.layers = 1;
    c.query_width = 16;
    c.extra_tokens = extra;
    NnModel::new(c, 7).unwrap()
}

fn fingerprint(model: &NnModel) -> String {
    let ck = Checkpoint::new(model.params.clone(), None, 0, "probe", 0, serde_json::Value::Null);
    hex::encode(Sha256::digest(ck.to_bytes().unwrap()))
}

#[test]
fn constant_positions_put_all_mass_at_zero() {
    let keys: Vec<f64> = (0..40).map(|i| i as f64).collect();
    let h = histogram_from_positions(0, 8, &[0; 40], &keys, 4).unwrap();
    assert_eq!(h.overall[0], 1.0);
    for row in &h.by_bin {
        assert_eq!(row[0], 1.0);
    }
    assert_eq!(h.mode(), 0);
}

#[test]
fn binary_search_first_lookup_is_the_middle() {
    let inst = eval_instances(&DistributionSpec::uniform1d(16), 300, 1).unwrap();
    let h = binary_search_histogram(&inst, 0, 4).unwrap();
    assert_eq!(h.overall[8], 1.0);
    let h2 = binary_search_histogram(&inst, 1, 4).unwrap();
    let mass: f64 = h2.overall[4] + h2.overall[12];
    assert!((mass - 1.0).abs() < 1e-12);
}

#[test]
fn model_histograms_are_distributions_and_deterministic() {
    let model = tiny_model(8, 1, 3, 0);
    let before = fingerprint(&model);
    let inst = eval_instances(&DistributionSpec::uniform1d(8), 200, 3).unwrap();
    for step in 0..3 {
        let a = lookup_histogram(&model, &inst, step, 4).unwrap();
        let b = lookup_histogram(&model, &inst, step, 4).unwrap();
        assert_eq!(a, b);
        assert!((a.overall.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for row in &a.by_bin {
            let s: f64 = row.iter().sum();
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
        }
    }
    assert!(lookup_histogram(&model, &inst, 3, 4).is_err());
    assert_eq!(fingerprint(&model), before);
}

fn check_symmetric(m: &AdjacencyDistanceMatrix) {
    for mat in m.per_dim.iter().chain(std::iter::once(&m.combined)) {
        for i in 0..m.n {
            assert_eq!(mat[i * m.n + i], 0.0);
            for j in 0..m.n {
                assert_eq!(mat[i * m.n + j], mat[j * m.n + i]);
            }
        }
    }
}

#[test]
fn adjacency_is_symmetric_with_zero_diagonal() {
    let spec = DistributionSpec::uniform2d(16);
    let inst = eval_instances(&spec, 50, 4).unwrap();
    let model = tiny_model(16, 2, 2, 0);
    let before = fingerprint(&model);
    check_symmetric(&adjacency_distance_matrix(&model, &inst).unwrap());
    check_symmetric(&kd_adjacency_matrix(&inst).unwrap());
    assert_eq!(fingerprint(&model), before);
}

#[test]
fn sorting_by_first_dimension_gives_a_band() {
    let spec = DistributionSpec::uniform2d(12);
    let inst = eval_instances(&spec, 200, 5).unwrap();
    let orders: Vec<Vec<usize>> = inst
        .iter()
        .map(|i| {
            let mut o: Vec<usize> = (0..i.n).collect();
            o.sort_by(|&a, &b| i.point(a)[0].total_cmp(&i.point(b)[0]));
            o
        })
        .collect();
    let m = adjacency_from_orders(&inst, &orders).unwrap();
    let n = m.n;
    for i in 0..n {
        for j in (i + 1)..n - 1 {
            assert!(m.per_dim[0][i * n + j] < m.per_dim[0][i * n + j + 1]);
        }
    }
    // the second dimension carries no structure under this order
    let spread = |k: usize| {
        let row: Vec<f64> = (1..n).map(|j| m.per_dim[k][j]).collect();
        row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - row.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    assert!(spread(1) < 0.25 * spread(0), "{} vs {}", spread(1), spread(0));
}

fn random_design(rows: usize, p: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed, &[]);
    (0..rows).map(|_| (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
}

#[test]
fn ols_matches_normal_equations() {
    let mut rng = seeded(11, &[]);
    for trial in 0..20 {
        let (rows, p) = (30 + trial, 1 + trial % 9);
        let x = random_design(rows, p, trial as u64);
        let y: Vec<f64> = (0..rows).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let fit = ols(&x, &y).unwrap();
        let a = DMatrix::from_fn(rows, p + 1, |i, j| if j < p { x[i][j] } else { 1.0 });
        let b = DVector::from_vec(y.clone());
        let ata = a.transpose() * &a;
        let beta = ata.lu().solve(&(a.transpose() * b)).unwrap();
        for j in 0..p {
            assert!((fit.coefficients[j] - beta[j]).abs() < 1e-8);
        }
        assert!((fit.intercept - beta[p]).abs() < 1e-8);
        assert!(fit.r2 <= 1.0);
    }
}

#[test]
fn ols_recovers_copies_and_means() {
    let x = random_design(60, 6, 2);
    let copy: Vec<f64> = x.iter().map(|r| r[3]).collect();
    let fit = ols(&x, &copy).unwrap();
    for (j, c) in fit.coefficients.iter().enumerate() {
        assert!((c - f64::from(u8::from(j == 3))).abs() < 1e-10);
    }
    assert!(fit.intercept.abs() < 1e-10);
    assert!((fit.r2 - 1.0).abs() < 1e-12);

    let mean: Vec<f64> = x.iter().map(|r| r.iter().sum::<f64>() / 6.0).collect();
    let fit = ols(&x, &mean).unwrap();
    assert!(fit.coefficients.iter().all(|c| (c - 1.0 / 6.0).abs() < 1e-10));
}

#[test]
fn ols_rejects_underdetermined_and_singular_designs() {
    let x = random_design(5, 6, 3);
    let y = vec![0.0; 5];
    let err = ols(&x, &y).unwrap_err().to_string();
    assert!(err.contains("at least 7"));
    let mut x = random_design(20, 3, 4);
    x.iter_mut().for_each(|r| r[2] = 2.0 * r[0]);
    assert!(ols(&x, &vec![1.0; 20]).is_err());
}

#[test]
fn extra_space_regression_runs_on_a_checkpoint() {
    let model = tiny_model(6, 1, 2, 2);
    let before = fingerprint(&model);
    let inst = eval_instances(&DistributionSpec::uniform1d(6), 100, 6).unwrap();
    let fits = extra_space_regression(&model, &inst).unwrap();
    assert_eq!(fits.len(), 2);
    assert!(fits.iter().all(|f| f.coefficients.len() == 6 && f.r2 <= 1.0 + 1e-12));
    assert!(extra_space_regression(&model, &inst[..6]).is_err());
    assert!(extra_space_regression(&tiny_model(6, 1, 2, 0), &inst).is_err());
    assert_eq!(fingerprint(&model), before);
}

#[test]
fn pca_matches_dense_eigensolver() {
    for seed in 0..10 {
        let d = 3 + seed as usize % 4;
        let rows = random_design(8, d, 100 + seed);
        let p = pca(&rows, 2).unwrap();
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 8.0).collect();
        let cov = DMatrix::from_fn(d, d, |i, j| rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / 8.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for c in 0..2 {
            let k = order[c];
            assert!((p.eigenvalues[c] - eig.eigenvalues[k]).abs() < 1e-6);
            let v = eig.eigenvectors.column(k);
            let dot: f64 = (0..d).map(|i| v[i] * p.components[c][i]).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-6, "seed {seed} component {c}");
        }
    }
}

#[test]
fn separable_assignment_aligns_with_first_axis() {
    let mut rng = seeded(21, &[]);
    let queries: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let assigned: Vec<usize> = queries.iter().map(|q| usize::from(q[0] > 0.0)).collect();
    let probe = partition_from_assignments(&queries, &assigned, 3, &[], LogisticSettings::default()).unwrap();
    assert_eq!(probe.skipped, vec![2]);
    assert_eq!(probe.positions, vec![0, 1]);
    let pc = &probe.pca.components[0];
    let cos = pc[0].abs() / (pc[0] * pc[0] + pc[1] * pc[1]).sqrt();
    assert!(cos >= 0.99, "cos {cos}");
    assert_eq!(probe.queries.len(), 200);
}

#[test]
fn partition_probe_runs_on_a_checkpoint() {
    let model = tiny_model(8, 2, 1, 0);
    let inst = eval_instances(&DistributionSpec::uniform2d(8), 100, 8).unwrap();
    let settings = LogisticSettings { iterations: 200, ..Default::default() };
    match partition_probe(&model, &inst, settings) {
        Ok(p) => {
            assert_eq!(p.positions.len() + p.skipped.len(), 8);
            assert_eq!(p.data.len(), 8);
        }
        Err(e) => assert!(e.to_string().contains("fewer than two")),
    }
}

#[test]
fn cms_memory_map_recovers_hashes_and_delta() {
    let universe = 40;
    let sketch = CountMinSketch::new(8, 2, 0.87, &mut seeded(2, &[])).unwrap();
    let nets = FreqNets::CountMin(CmsEmulation::from_sketch(&sketch, universe));
    let map = freq_memory_map(&nets).unwrap();
    assert!((map.mean_delta - 0.87).abs() < 1e-12);
    for en in &map.entries {
        assert_eq!(en.positions, vec![sketch.position(0, en.element), sketch.position(1, en.element)]);
        assert!(en.values.iter().all(|&v| v == 0.87));
        let alone = en.positions.iter().all(|&p| {
            map.entries.iter().filter(|o| o.positions.contains(&p)).count() == 1
        });
        assert_eq!(en.dedicated, alone);
    }
    assert_eq!(freq_memory_map(&nets).unwrap(), map);
}

#[test]
fn svg_emitters_produce_rects_and_paths() {
    let heat = svg_heatmap(2, 2, &[0.0, 1.0, 1.0, 0.0], 10.0);
    assert_eq!(heat.matches("<rect").count(), 4);
    let sc = svg_scatter(&[(0.0, 0.0, 0), (1.0, 1.0, 1)], 100.0);
    assert_eq!(sc.matches("<rect").count(), 2);
    let lines = svg_lines(&[vec![0.0, 1.0, 0.5]], 100.0, 50.0);
    assert!(lines.contains("<path d=\"M"));
    assert_eq!(matrix_csv(2, 2, &[1.0, 2.0, 3.0, 4.0]), "1,2\n3,4\n");
}

