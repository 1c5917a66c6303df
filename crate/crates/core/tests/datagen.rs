use std::collections::HashMap;

use learnds::datagen::*;
use learnds::rng::seeded;
use proptest::prelude::*;
use rand::Rng;

fn all_specs() -> Vec<DistributionSpec> {
    vec![
        DistributionSpec::uniform1d(16),
        DistributionSpec::zipf(100, 200, ZIPF_ALPHA),
        DistributionSpec::hard1d(15, HARD_A),
        DistributionSpec::uniform2d(100),
        DistributionSpec::hard2d(16, HARD_A),
        DistributionSpec::hypersphere(100, 30, 0.8),
        DistributionSpec::synthetic_rep(50, 128, 200),
    ]
}

#[test]
fn samplers_are_pure_functions_of_the_seed() {
    for spec in all_specs() {
        spec.validate().unwrap();
        let a = sample_nn_instance(&spec, 77).unwrap();
        let b = sample_nn_instance(&spec, 77).unwrap();
        let c = sample_nn_instance(&spec, 78).unwrap();
        assert_eq!(a, b, "{:?}", spec.kind);
        assert_ne!(a, c, "{:?}", spec.kind);
        assert_eq!(a.data.len(), spec.n * spec.d);
    }
}

#[test]
fn emitted_targets_match_the_oracle() {
    for spec in all_specs() {
        for seed in 0..200 {
            let inst = sample_nn_instance(&spec, seed).unwrap();
            assert_eq!(inst.recompute_nn().unwrap(), inst.y_index);
            assert_eq!(inst.point(inst.y_index), inst.y_value.as_slice());
        }
    }
}

#[test]
fn query_on_a_data_point_returns_it() {
    let mut rng = seeded(3, &[]);
    for _ in 0..200 {
        let data: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = perturbed_query(&data, 2, 0.0, &mut rng);
        let y = brute_force_nn(&data, 2, &q).unwrap();
        assert_eq!(&data[2 * y..2 * y + 2], q.as_slice());
    }
}

#[test]
fn zipf_dataset_values_are_distinct() {
    let spec = DistributionSpec::zipf(100, 200, ZIPF_ALPHA);
    for seed in 0..50 {
        let inst = sample_nn_instance(&spec, seed).unwrap();
        let mut v = inst.data.clone();
        v.sort_by(f64::total_cmp);
        v.dedup();
        assert_eq!(v.len(), 100);
        assert!(inst.data.iter().chain(&inst.query).all(|&x| (1.0..=200.0).contains(&x) && x.fract() == 0.0));
    }
}

#[test]
fn zipf_probabilities_are_normalized_and_monotone() {
    for (alpha, k) in [(1.2, 1000), (0.5, 7), (2.0, 200), (0.0, 3)] {
        let z = sample_zipf(alpha, k, 5, true).unwrap();
        let p = z.rank_probs();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.windows(2).all(|w| w[0] >= w[1]));
        let total: f64 = (1..=k).map(|e| z.prob(e)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zipf_empirical_frequencies_follow_the_ranks() {
    let z = sample_zipf(1.2, 50, 9, true).unwrap();
    let mut rng = seeded(9, &[1]);
    let mut counts = vec![0usize; 51];
    let draws = 200_000;
    for _ in 0..draws {
        counts[z.sample(&mut rng)] += 1;
    }
    for rank in 0..5 {
        let e = z.element_at_rank(rank);
        let freq = counts[e] as f64 / draws as f64;
        assert!((freq - z.rank_probs()[rank]).abs() < 0.005);
    }
}

#[test]
fn hard_tree_levels_respect_their_ranges() {
    let a = HARD_A;
    for n in [1, 2, 7, 15, 16, 31] {
        let mut worst = vec![0.0f64; 8];
        let mut rng = seeded(21, &[n as u64]);
        for _ in 0..2000 {
            let t = sample_hard_tree(n, a, &mut rng);
            for i in 1..n {
                let p = HardTree::parent(i).unwrap();
                let lvl = t.levels[i];
                worst[lvl] = worst[lvl].max((t.values[i] - t.values[p]).abs());
                // left children sit below their parent, right children above
                assert_eq!(t.values[i] < t.values[p], i % 2 == 1);
            }
            assert!(t.values[0] >= 0.0 && t.values[0] <= a.powf((n as f64).log2()));
        }
        for (lvl, &w) in worst.iter().enumerate().skip(1) {
            assert!(w <= a.powf((n as f64).log2() - lvl as f64));
        }
    }
}

#[test]
fn hard_query_is_centered_on_the_data() {
    let mut rng = seeded(31, &[]);
    let data: Vec<f64> = sample_hard(15, HARD_A, 4).unwrap();
    let mean: f64 = data.iter().sum::<f64>() / 15.0;
    let draws = 200_000;
    let qmean: f64 = (0..draws)
        .map(|_| perturbed_query(&data, 1, 1.0, &mut rng)[0])
        .sum::<f64>()
        / draws as f64;
    let spread = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 15.0 + 1.0;
    // standard error of the mean is sqrt(spread / draws)
    assert!((qmean - mean).abs() < 5.0 * (spread / draws as f64).sqrt());
}

#[test]
fn stream_counts_match_a_recount() {
    let spec = StreamSpec {
        schedule: QuerySchedule::EveryStep,
        ..StreamSpec::zipf(1000, ZIPF_ALPHA)
    };
    for seed in 0..200 {
        let s = gen_stream(&spec, 100, seed).unwrap();
        assert_eq!(s.queries.len(), 100);
        let mut table: HashMap<usize, usize> = HashMap::new();
        let mut t = 0;
        for q in &s.queries {
            while t < q.t {
                *table.entry(s.elements[t]).or_default() += 1;
                t += 1;
            }
            assert_eq!(q.count, table.get(&q.element).copied().unwrap_or(0));
            assert_eq!(q.count, s.prefix_count(q.element, q.t));
        }
    }
}

#[test]
fn random_schedule_draws_the_requested_number_of_queries() {
    let s = gen_stream(&StreamSpec::zipf(1000, ZIPF_ALPHA), 30, 1).unwrap();
    assert_eq!(s.queries.len(), 8);
    assert!(s.queries.iter().all(|q| (1..=30).contains(&q.t)));
}

#[test]
fn synthetic_labels_are_nearest_in_embedding_space() {
    let space = SyntheticRepSpace::new(200, 128, SYNTHETIC_SIGMA);
    let mut rng = seeded(41, &[]);
    let trials = 20_000;
    let mut wins = 0;
    for _ in 0..trials {
        let l = rng.gen_range(0..200);
        let mut other = rng.gen_range(0..199);
        if other >= l {
            other += 1;
        }
        let anchor = space.embed(l, &mut rng);
        let same = squared_distance(&anchor, &space.embed(l, &mut rng));
        let diff = squared_distance(&anchor, &space.embed(other, &mut rng));
        wins += usize::from(same < diff);
    }
    let rate = wins as f64 / trials as f64;
    assert!(rate >= 0.99, "separation rate {rate}");
    eprintln!("separation rate {rate}");
}

#[test]
fn noiseless_synthetic_target_is_the_identical_embedding() {
    let space = SyntheticRepSpace::new(200, 16, 0.0);
    let mut rng = seeded(42, &[]);
    for _ in 0..100 {
        let inst = space.sample(50, &mut rng).unwrap();
        assert_eq!(inst.y_value, inst.query);
        let labels = inst.labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|&&l| Some(l) == inst.query_label).count(), 1);
    }
    assert!(space.sample(201, &mut rng).is_err());
    assert!(sample_synthetic_rep_instance(10, 4, 11, 0).is_err());
}

#[test]
fn instance_dump_round_trips_and_checks_targets() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("inst.jsonl");
    let mut records = Vec::new();
    for spec in all_specs() {
        for seed in 0..3 {
            let inst = sample_nn_instance(&spec, seed).unwrap();
            records.push(InstanceRecord::from_instance(&spec, seed, &inst));
        }
    }
    write_instances(&path, &records).unwrap();
    let back = read_instances(&path).unwrap();
    assert_eq!(back, records);
    for (r, spec) in back.iter().zip(all_specs().iter().flat_map(|s| std::iter::repeat(s).take(3))) {
        assert_eq!(r.to_instance().unwrap(), sample_nn_instance(spec, r.seed).unwrap());
    }
    let mut bad = records[0].clone();
    bad.y_index = (bad.y_index + 1) % bad.data.len();
    assert!(bad.to_instance().is_err());
}

proptest! {
    #[test]
    fn hypersphere_pairs_hold_their_constraints(d in 2usize..40, rho in 0.0f64..=1.0, seed: u64) {
        let (x, q) = sample_hypersphere_pair(d, rho, seed).unwrap();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let dot: f64 = x.iter().zip(&q).map(|(a, b)| a * b).sum();
        prop_assert!((norm(&x) - 1.0).abs() < 1e-12);
        prop_assert!((norm(&q) - 1.0).abs() < 1e-12);
        prop_assert!((dot - rho).abs() < 1e-12);
    }

    #[test]
    fn oracle_is_a_true_argmin(
        points in prop::collection::vec((-3i32..3, -3i32..3), 1..30),
        q in (-3i32..3, -3i32..3),
    ) {
        // a coarse integer grid makes equidistant points common
        let data: Vec<f64> = points.iter().flat_map(|&(a, b)| [f64::from(a), f64::from(b)]).collect();
        let qv = [f64::from(q.0), f64::from(q.1)];
        let y = brute_force_nn(&data, 2, &qv).unwrap();
        let best = squared_distance(&data[2 * y..2 * y + 2], &qv);
        for (i, x) in data.chunks(2).enumerate() {
            let dist = squared_distance(x, &qv);
            prop_assert!(dist > best || (dist == best && i >= y));
        }
    }
}

#[test]
fn rho_constraint_holds_for_the_paper_setting() {
    for seed in 0..1000 {
        let (x, q) = sample_hypersphere_pair(30, 0.8, seed).unwrap();
        let dot: f64 = x.iter().zip(&q).map(|(a, b)| a * b).sum();
        assert!((dot - 0.8).abs() < 1e-9);
    }
}
