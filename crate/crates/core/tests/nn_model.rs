use learnds::datagen::{sample_nn_instance, DistributionSpec, NnInstance};
use learnds::nn_model::{HistoryEntry, LossKind, Mode, ModelConfig, NnModel};
use learnds::rng::seeded;
use learnds_autodiff::Tape;
use proptest::prelude::*;

fn tiny(n: usize, d: usize, m: usize) -> ModelConfig {
    let mut c = ModelConfig::desk(n, d, m);
    c.width = 8;
    c.heads = 2;
    c.query_width = 16;
    c.layers = 1;
    c
}

fn instance(n: usize, d: usize, seed: u64) -> NnInstance {
    let spec = if d == 1 {
        DistributionSpec::uniform1d(n)
    } else {
        DistributionSpec::hypersphere(n, d, 0.8)
    };
    sample_nn_instance(&spec, seed).unwrap()
}

/// Same points, listed in a different order.
fn permuted(inst: &NnInstance, perm: &[usize]) -> NnInstance {
    let data: Vec<f64> = perm.iter().flat_map(|&j| inst.point(j).to_vec()).collect();
    NnInstance {
        data,
        y_index: perm.iter().position(|&j| j == inst.y_index).unwrap(),
        ..inst.clone()
    }
}

#[test]
fn ranks_are_permutation_equivariant() {
    let model = NnModel::new(tiny(6, 2, 2), 3).unwrap();
    let inst = instance(6, 2, 1);
    let perm = [4, 0, 5, 2, 1, 3];
    let shuffled = permuted(&inst, &perm);
    let a = model.ranks(&[&inst]).unwrap().pop().unwrap();
    let b = model.ranks(&[&shuffled]).unwrap().pop().unwrap();
    for (i, &j) in perm.iter().enumerate() {
        assert!((b[i] - a[j]).abs() < 1e-9, "rank of point {j} moved: {} vs {}", b[i], a[j]);
    }
}

#[test]
fn sorted_structure_ignores_input_order() {
    let model = NnModel::new(tiny(8, 1, 3), 5).unwrap();
    let inst = instance(8, 1, 2);
    let shuffled = permuted(&inst, &[7, 6, 5, 4, 3, 2, 1, 0]);
    let (a, _) = model.build_structure(&inst, Mode::Eval).unwrap();
    let (b, _) = model.build_structure(&shuffled, Mode::Eval).unwrap();
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert!((x - y).abs() < 1e-12);
    }
    let ta = model.run_query_execution(&inst).unwrap();
    let tb = model.run_query_execution(&shuffled).unwrap();
    assert_eq!(ta.trace.positions, tb.trace.positions);
}

#[test]
fn query_execution_reads_exactly_m_rows() {
    for (m, extra) in [(1, 0), (3, 0), (4, 5)] {
        let mut c = tiny(8, 1, m);
        c.extra_tokens = extra;
        let model = NnModel::new(c, 1).unwrap();
        for s in 0..5 {
            let t = model.run_query_execution(&instance(8, 1, s)).unwrap();
            assert_eq!(t.accesses, m);
            assert_eq!(t.trace.len(), m);
            assert!(t.trace.positions.iter().all(|&p| p < 8 + extra));
        }
    }
}

#[test]
fn prediction_without_extra_space_is_a_data_point() {
    for adaptive in [true, false] {
        let mut c = tiny(10, 2, 3);
        c.adaptive = adaptive;
        let model = NnModel::new(c, 9).unwrap();
        for s in 0..10 {
            let inst = instance(10, 2, s);
            let t = model.run_query_execution(&inst).unwrap();
            assert!((0..10).any(|j| inst.point(j) == t.prediction.as_slice()));
        }
    }
}

#[test]
fn query_step_checks_history_and_budget() {
    let model = NnModel::new(tiny(8, 1, 3), 0).unwrap();
    let mut rng = seeded(0, &[]);
    let h = HistoryEntry {
        position: 2,
        value: vec![0.1],
    };
    assert!(model.query_step(&[0.0], &[], 1, Mode::Eval, &mut rng).is_err());
    assert!(model.query_step(&[0.0], &[h.clone(), h.clone(), h.clone()], 3, Mode::Eval, &mut rng).is_err());
    let hard = model.query_step(&[0.0], &[h.clone()], 1, Mode::Eval, &mut rng).unwrap();
    assert_eq!(hard.iter().filter(|&&x| x == 1.0).count(), 1);
    assert_eq!(hard.iter().sum::<f64>(), 1.0);
    let soft = model.query_step(&[0.0], &[h], 1, Mode::Train, &mut rng).unwrap();
    assert!((soft.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(soft.iter().all(|&x| x > 0.0));
}

#[test]
fn non_adaptive_lookups_ignore_history() {
    let mut c = tiny(8, 1, 3);
    c.adaptive = false;
    let model = NnModel::new(c, 4).unwrap();
    let mut rng = seeded(0, &[]);
    let a = vec![HistoryEntry { position: 0, value: vec![-0.9] }];
    let b = vec![HistoryEntry { position: 7, value: vec![0.9] }];
    let ra = model.query_step(&[0.3], &a, 1, Mode::Eval, &mut rng).unwrap();
    let rb = model.query_step(&[0.3], &b, 1, Mode::Eval, &mut rng).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn same_seed_same_parameters() {
    let a = NnModel::new(tiny(8, 1, 2), 17).unwrap();
    let b = NnModel::new(tiny(8, 1, 2), 17).unwrap();
    let c = NnModel::new(tiny(8, 1, 2), 18).unwrap();
    assert_eq!(a.params.tensors(), b.params.tensors());
    assert_ne!(a.params.tensors(), c.params.tensors());
}

#[test]
fn training_forward_is_finite_and_reaches_every_parameter() {
    let model = NnModel::new(tiny(8, 1, 3), 2).unwrap();
    let insts: Vec<NnInstance> = (0..4).map(|s| instance(8, 1, s)).collect();
    let batch: Vec<&NnInstance> = insts.iter().collect();
    for loss in [LossKind::Mse, LossKind::CrossEntropy] {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true, true).unwrap();
        let out = model.train_forward(&mut tape, &p, &batch, loss, 1.0, &mut seeded(1, &[])).unwrap();
        assert_eq!(out.values.len(), 3);
        assert!(tape.value(out.loss).data()[0].is_finite());
        let grads = p.gradients(&tape.backward(out.loss).unwrap());
        let names = model.params.names();
        for (name, g) in names.iter().zip(&grads) {
            let g = g.as_ref().unwrap_or_else(|| panic!("{name} is frozen"));
            assert!(g.iter().all(|x| x.is_finite()), "{name}");
        }
        assert!(grads.iter().flatten().any(|g| g.iter().any(|&x| x != 0.0)));
    }
}

#[test]
fn frozen_binding_yields_no_data_processor_gradients() {
    let model = NnModel::new(tiny(8, 1, 2), 2).unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false, true).unwrap();
    let inst = instance(8, 1, 0);
    let out = model
        .train_forward(&mut tape, &p, &[&inst], LossKind::Mse, 0.0, &mut seeded(0, &[]))
        .unwrap();
    let grads = p.gradients(&tape.backward(out.loss).unwrap());
    for (name, g) in model.params.names().iter().zip(&grads) {
        assert_eq!(g.is_none(), name.starts_with(learnds::nn_model::DATA_PROCESSOR_PREFIX), "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn soft_structure_rows_stay_in_the_data_hull(seed in 0u64..10_000) {
        let model = NnModel::new(tiny(6, 1, 2), seed % 7).unwrap();
        let inst = instance(6, 1, seed);
        let (s, perm) = model.build_structure(&inst, Mode::Train).unwrap();
        let lo = inst.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = inst.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for &v in &s.rows {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
        for i in 0..6 {
            prop_assert!((perm.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hard_structure_is_a_sorted_copy(seed in 0u64..10_000) {
        let model = NnModel::new(tiny(7, 1, 2), seed % 5).unwrap();
        let inst = instance(7, 1, seed);
        let (s, _) = model.build_structure(&inst, Mode::Eval).unwrap();
        let order = s.order.clone().unwrap();
        let mut seen = order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..7).collect::<Vec<_>>());
        for (row, &j) in order.iter().enumerate() {
            prop_assert_eq!(s.rows[row], inst.data[j]);
        }
    }
}
