use learnds::baselines::*;
use learnds::datagen::{brute_force_nn, squared_distance, StreamSpec, QuerySchedule, gen_stream};
use learnds::rng::seeded;
use learnds::trace::LookupStats;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn sorted_uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Reference bisection written recursively over the unread open interval.
fn reference_bisection(data: &[f64], q: f64, lo: i64, hi: i64, budget: usize, out: &mut Vec<usize>) {
    if hi - lo <= 1 || budget == 0 {
        return;
    }
    let mid = lo + (hi - lo + 1) / 2;
    out.push(mid as usize);
    if data[mid as usize] <= q {
        reference_bisection(data, q, mid, hi, budget - 1, out);
    } else {
        reference_bisection(data, q, lo, mid, budget - 1, out);
    }
}

#[test]
fn binary_search_matches_the_reference_step_counter() {
    let mut rng = seeded(1, &[]);
    let m = 7;
    let mut stats = LookupStats::new(m);
    let mut reference = LookupStats::new(m);
    for _ in 0..5000 {
        let data = sorted_uniform(&mut rng, 100);
        let q = rng.gen_range(-1.0..1.0);
        let y = brute_force_nn(&data, 1, &[q]).unwrap();
        let trace = binary_search_trace(&data, q, m).unwrap();
        stats.record_trace(&trace, &[q], &[data[y]]);

        let mut probes = Vec::new();
        reference_bisection(&data, q, -1, 100, m, &mut probes);
        assert_eq!(trace.positions, probes);
        // independent best-so-far: running minimum of |v - q|
        let mut best = f64::INFINITY;
        let mut best_v = f64::NAN;
        let mut curve = Vec::new();
        for i in 0..m {
            if let Some(&p) = probes.get(i) {
                if (data[p] - q).abs() < best {
                    best = (data[p] - q).abs();
                    best_v = data[p];
                }
            }
            curve.push(vec![best_v]);
        }
        reference.record(&curve, &[data[y]]);
    }
    assert_eq!(stats, reference);
    // N = 100 and M = 7 always finds the neighbor
    assert_eq!(stats.accuracy()[m - 1], 1.0);
}

#[test]
fn binary_search_finishes_within_log_plus_one() {
    let mut rng = seeded(2, &[]);
    for _ in 0..3000 {
        let n = rng.gen_range(1..300);
        let data = sorted_uniform(&mut rng, n);
        let q = rng.gen_range(-1.2..1.2);
        let budget = (n as f64).log2().ceil() as usize + 1;
        let trace = binary_search_trace(&data, q, usize::MAX).unwrap();
        assert!(trace.len() <= budget, "n={n} used {}", trace.len());
        let y = brute_force_nn(&data, 1, &[q]).unwrap();
        let best = trace.best_values(&[q], trace.len());
        assert_eq!(best.last().unwrap()[0], data[y]);
    }
}

#[test]
fn interpolation_needs_fewer_probes_on_uniform_data() {
    let mut rng = seeded(3, &[]);
    let probes_to_exact = |trace: &learnds::trace::LookupTrace, q: f64, y: f64| {
        let best = trace.best_values(&[q], trace.len());
        best.iter().position(|v| v[0] == y).map(|i| i + 1).expect("search ends at the neighbor")
    };
    let (mut interp, mut binary) = (0usize, 0usize);
    let trials = 5000;
    for _ in 0..trials {
        let data = sorted_uniform(&mut rng, 100);
        let q = rng.gen_range(-1.0..1.0);
        let y = data[brute_force_nn(&data, 1, &[q]).unwrap()];
        interp += probes_to_exact(&interpolation_search_trace(&data, q, 100).unwrap(), q, y);
        binary += probes_to_exact(&binary_search_trace(&data, q, 100).unwrap(), q, y);
    }
    let (mi, mb) = (interp as f64 / trials as f64, binary as f64 / trials as f64);
    assert!(mi < mb, "interpolation {mi} vs binary {mb}");
}

fn check_kd_invariants(tree: &KdTree, node: usize, level: usize) -> Vec<usize> {
    match tree.nodes[node] {
        KdNode::Leaf { point } => vec![point],
        KdNode::Split { dim, value, left, right } => {
            assert_eq!(dim, level % tree.d);
            let l = check_kd_invariants(tree, left, level + 1);
            let r = check_kd_invariants(tree, right, level + 1);
            assert!(l.iter().all(|&p| tree.point(p)[dim] <= value));
            assert!(r.iter().all(|&p| tree.point(p)[dim] >= value));
            assert!(l.len() == r.len() || l.len() == r.len() + 1);
            [l, r].concat()
        }
    }
}

#[test]
fn kd_tree_with_unlimited_budget_is_exact() {
    let mut rng = seeded(4, &[]);
    for _ in 0..1000 {
        let data: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let tree = kd_build(&data, 2).unwrap();
        let mut leaves = check_kd_invariants(&tree, 0, 0);
        assert_eq!(leaves, tree.in_order());
        leaves.sort_unstable();
        assert_eq!(leaves, (0..100).collect::<Vec<_>>());
        let trace = kd_query(&tree, &q, 100).unwrap();
        let y = brute_force_nn(&data, 2, &q).unwrap();
        let best = trace.best_values(&q, trace.len());
        assert_eq!(best.last().unwrap().as_slice(), &data[2 * y..2 * y + 2]);
    }
}

#[test]
fn kd_tree_handles_duplicate_points() {
    let data = [0.5, 0.5, 0.5, 0.5, -0.5, 0.1, 0.5, 0.5];
    let tree = kd_build(&data, 2).unwrap();
    let trace = kd_query(&tree, &[0.4, 0.4], 4).unwrap();
    let best = learnds::trace::best_so_far(&trace.values, &[0.4, 0.4]);
    let winner = trace.positions[*best.last().unwrap()];
    assert_eq!(squared_distance(tree.point(winner), &[0.4, 0.4]), squared_distance(&[0.5, 0.5], &[0.4, 0.4]));
}

#[test]
fn lsh_buckets_are_full_and_points_unique() {
    let mut rng = seeded(5, &[]);
    for k in 0..5 {
        let data: Vec<f64> = (0..96 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if 96 % (1 << k) != 0 {
            continue;
        }
        let t = lsh_build(&data, 3, k, &mut rng).unwrap();
        assert_eq!(t.capacity * t.buckets(), 96);
        let mut slots = t.slots.clone();
        slots.sort_unstable();
        assert_eq!(slots, (0..96).collect::<Vec<_>>());
    }
    let data: Vec<f64> = (0..100 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let err = lsh_build(&data, 2, 3, &mut rng).unwrap_err().to_string();
    assert!(err.contains("must divide"));
}

#[test]
fn lsh_self_queries_land_in_their_own_bucket() {
    let mut rng = seeded(6, &[]);
    for _ in 0..300 {
        let data: Vec<f64> = (0..64 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = lsh_build(&data, 8, 2, &mut rng).unwrap();
        let at_home = (0..64)
            .filter(|&i| {
                let home = t.slots.iter().position(|&p| p == i).unwrap() / t.capacity;
                t.hash(&data[i * 8..(i + 1) * 8]) == home
            })
            .count();
        assert_eq!(at_home, 64 - t.displaced);
        let i = rng.gen_range(0..64);
        let r = lsh_query(&t, &data[i * 8..(i + 1) * 8], 64, &mut rng).unwrap();
        assert_eq!(r.best_point, i);
    }
}

#[test]
fn bucket_accuracy_grows_with_the_bucket_count() {
    let mut rng = seeded(7, &[]);
    let instances: Vec<(Vec<f64>, f64)> = (0..2000)
        .map(|_| {
            let d: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (d, rng.gen_range(-1.0..1.0))
        })
        .collect();
    let mut prev = 0.0;
    let mut acc = 0.0;
    for t in [1, 4, 16, 64, 256, 2048] {
        let hits = instances
            .iter()
            .filter(|(d, q)| {
                let s = bucket1d_build(d, t).unwrap();
                bucket1d_query(&s, *q) == brute_force_nn(d, 1, &[*q]).unwrap()
            })
            .count();
        acc = hits as f64 / instances.len() as f64;
        assert!(acc >= prev, "T={t}: {acc} < {prev}");
        prev = acc;
    }
    assert!(acc > 0.9, "{acc}");
}

proptest! {
    #[test]
    fn unit_delta_sketch_never_undercounts(seed: u64, width in 1usize..64, depth in 1usize..5) {
        let spec = StreamSpec { schedule: QuerySchedule::EveryStep, ..StreamSpec::zipf(1000, 1.2) };
        let stream = gen_stream(&spec, 100, seed).unwrap();
        let mut rng = seeded(seed, &[9]);
        let mut cms = CountMinSketch::new(width, depth, 1.0, &mut rng).unwrap();
        let mut t = 0;
        for q in &stream.queries {
            while t < q.t {
                cms_update(&mut cms, stream.elements[t]);
                t += 1;
            }
            let est = cms_query(&cms, q.element);
            prop_assert!(est >= q.count as f64);
            prop_assert!(est <= q.t as f64);
        }
        prop_assert_eq!(cms.memory(), width * depth);
        prop_assert!(cms.counters.iter().all(|&c| c >= 0.0));
    }
}
