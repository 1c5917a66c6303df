use learnds::baselines::CountMinSketch;
use learnds::datagen::{gen_stream, QuerySchedule, StreamSpec};
use learnds::freqest::*;
use learnds::nn_model::Mode;
use learnds::rng::seeded;
use learnds_autodiff::Tape;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model(k: usize, m: usize) -> LearnedFreq {
    let mut c = FreqConfig::desk(k, m, 50);
    c.width = 16;
    c.psi_width = 16;
    LearnedFreq::new(c, 3).unwrap()
}

fn every_step(universe: usize) -> StreamSpec {
    StreamSpec {
        schedule: QuerySchedule::EveryStep,
        ..StreamSpec::zipf(universe, 1.2)
    }
}

#[test]
fn zero_values_leave_state_unchanged() {
    let mut s = SketchState::new(4);
    s.values = vec![1.0, 2.0, 3.0, 4.0];
    let plan = UpdatePlan {
        positions: vec![vec![0.0, 1.0, 0.0, 0.0], vec![0.25, 0.25, 0.25, 0.25]],
        values: vec![0.0, 0.0],
    };
    apply_update(&mut s, &plan, Mode::Train).unwrap();
    assert_eq!(s.values, vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.t, 1);
}

#[test]
fn eval_update_with_one_lookup_changes_one_coordinate() {
    let nets = FreqNets::Learned(small_model(8, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for e in 1..=50 {
        let mut s = SketchState::new(8);
        stream_update(&mut s, e, &nets, Mode::Eval, &mut rng).unwrap();
        let plan = nets.update_plan(e, Mode::Eval, &mut rng).unwrap();
        let changed: Vec<usize> = (0..8).filter(|&j| s.values[j] != 0.0).collect();
        assert!(changed.len() <= 1);
        let j = plan.positions[0].iter().position(|&w| w == 1.0).unwrap();
        assert_eq!(s.values[j], plan.values[0]);
        assert_eq!(s.writes, 1);
    }
}

#[test]
fn update_is_linear_in_values() {
    let nets = FreqNets::Learned(small_model(8, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for e in [1, 7, 33] {
        for mode in [Mode::Eval, Mode::Train] {
            let plan = nets.update_plan(e, mode, &mut rng).unwrap();
            let mut scaled = plan.clone();
            scaled.values.iter_mut().for_each(|v| *v *= 4.0);
            let mut a = SketchState::new(8);
            let mut b = SketchState::new(8);
            apply_update(&mut a, &plan, mode).unwrap();
            apply_update(&mut b, &scaled, mode).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(4.0 * x, *y);
            }
        }
    }
}

#[test]
fn rejects_elements_outside_universe() {
    let nets = FreqNets::Learned(small_model(8, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = SketchState::new(8);
    assert!(stream_update(&mut s, 0, &nets, Mode::Eval, &mut rng).is_err());
    assert!(stream_update(&mut s, 51, &nets, Mode::Eval, &mut rng).is_err());
    assert!(estimate_frequency(51, &s, &nets, Mode::Eval, &mut rng).is_err());
    assert_eq!(s.t, 0);
}

#[test]
fn eval_accesses_are_bounded_by_m() {
    let nets = FreqNets::Learned(small_model(8, 3));
    let stream = gen_stream(&every_step(50), 30, 4).unwrap();
    let mut runner = SketchRunner::new(&nets);
    for (i, &e) in stream.elements.iter().enumerate() {
        runner.update(e).unwrap();
        assert_eq!(runner.state.writes, 3 * (i + 1));
    }
    for q in 1..=10 {
        let before = runner.state.reads();
        runner.estimate(q).unwrap();
        assert_eq!(runner.state.reads() - before, 3);
    }
}

#[test]
fn replay_is_bit_identical() {
    let nets = FreqNets::Learned(small_model(8, 2));
    let stream = gen_stream(&every_step(50), 30, 9).unwrap();
    let run = |mode: Mode| {
        let mut rng = seeded(5, &[1]);
        let mut s = SketchState::new(8);
        for &e in &stream.elements {
            stream_update(&mut s, e, &nets, mode, &mut rng).unwrap();
        }
        let est = estimate_frequency(stream.elements[0], &s, &nets, mode, &mut rng).unwrap();
        (s.values, est)
    };
    for mode in [Mode::Eval, Mode::Train] {
        let (a, ea) = run(mode);
        let (b, eb) = run(mode);
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(ea.to_bits(), eb.to_bits());
    }
}

#[test]
fn exact_counter_has_zero_mae() {
    let spec = every_step(50);
    let suite = stream_suite(&spec, 40, 50, 2).unwrap();
    let r = eval_mae(&mut ExactCounter::default(), &suite).unwrap();
    assert_eq!(r.overall, 0.0);
    assert_eq!(r.queries, 50 * 40);
    assert!(r.per_timestep.iter().all(|x| *x == Some(0.0)));
}

#[test]
fn mae_matches_hand_count() {
    // independent recount straight from the stream elements
    let spec = StreamSpec::zipf(20, 1.0);
    let suite = stream_suite(&spec, 25, 30, 8).unwrap();
    let mut cms = CountMinSketch::new(4, 1, 1.0, &mut seeded(1, &[])).unwrap();
    let r = eval_mae(&mut cms, &suite).unwrap();
    let mut total = 0.0;
    let mut n = 0;
    for s in &suite {
        for q in &s.queries {
            let mut counters = [0.0f64; 4];
            let mut truth = 0;
            for &e in &s.elements[..q.t] {
                counters[cms.hashes[0].hash(e as u64, 4)] += 1.0;
                truth += usize::from(e == q.element);
            }
            total += (counters[cms.hashes[0].hash(q.element as u64, 4)] - truth as f64).abs();
            n += 1;
        }
    }
    assert_eq!(r.queries, n);
    assert!((r.overall - total / n as f64).abs() < 1e-12);
}

#[test]
fn train_forward_loss_is_finite_and_differentiable() {
    let model = small_model(8, 2);
    let spec = StreamSpec::zipf(50, 1.2);
    let streams: Vec<_> = (0..4).map(|i| gen_stream(&spec, 30, i).unwrap()).collect();
    let refs: Vec<_> = streams.iter().collect();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, |_| true).unwrap();
    let loss = model.train_forward(&mut tape, &p, &refs, &mut seeded(0, &[])).unwrap();
    assert!(tape.value(loss).data()[0].is_finite());
    let grads = tape.backward(loss).unwrap();
    let grads = p.gradients(&grads);
    assert!(grads.iter().all(|g| g.as_ref().is_some_and(|g| g.iter().all(|x| x.is_finite()))));
    assert!(grads.iter().flatten().any(|g| g.iter().any(|&x| x != 0.0)));
}

#[test]
fn batched_loss_matches_sequential_api_for_saturated_logits() {
    let mut model = small_model(4, 1);
    let names: Vec<String> = model.params.names().to_vec();
    for (name, t) in names.iter().zip(model.params.tensors_mut()) {
        if name == "upd.pos.b" {
            t.data_mut().copy_from_slice(&[400.0, 0.0, 0.0, 0.0]);
        }
        if name == "q0.l2.b" {
            t.data_mut().copy_from_slice(&[400.0, 0.0, 0.0, 0.0]);
        }
    }
    let nets = FreqNets::Learned(model.clone());
    let stream = learnds::datagen::StreamInstance {
        elements: vec![3, 3, 5],
        queries: vec![learnds::datagen::StreamQuery { element: 3, t: 3, count: 2 }],
    };
    let mut rng = seeded(0, &[]);
    let mut s = SketchState::new(4);
    for &e in &stream.elements {
        stream_update(&mut s, e, &nets, Mode::Train, &mut rng).unwrap();
    }
    let est = estimate_frequency(3, &s, &nets, Mode::Train, &mut rng).unwrap();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, |_| false).unwrap();
    let loss = model.train_forward(&mut tape, &p, &[&stream], &mut seeded(1, &[])).unwrap();
    assert!((tape.value(loss).data()[0] - (est - 2.0).abs()).abs() < 1e-6);
}

#[test]
fn checkpoint_round_trip() {
    let mut cfg = FreqTrainConfig::desk(8, 1, 50, 1.2, 30);
    cfg.model.width = 8;
    cfg.model.psi_width = 8;
    cfg.batch_size = 4;
    cfg.max_steps = 3;
    cfg.eval_every = 3;
    cfg.eval_streams = 5;
    let ck = train_freq(&cfg).unwrap();
    let bytes = ck.to_bytes().unwrap();
    let back = learnds_autodiff::Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
    let (model, c2) = load_freq_model(&back).unwrap();
    assert_eq!(c2, cfg);
    assert_eq!(model.params, ck.params);
}

fn cms_equivalence(seed: u64, w: usize, d: usize, delta: f64) {
    let universe = 50;
    let mut rng = seeded(seed, &[0]);
    let mut sketch = CountMinSketch::new(w, d, delta, &mut rng).unwrap();
    let nets = FreqNets::CountMin(CmsEmulation::from_sketch(&sketch, universe));
    let stream = gen_stream(&every_step(universe), 40, seed).unwrap();
    let mut runner = SketchRunner::new(&nets);
    for &e in &stream.elements {
        sketch.update(e);
        runner.update(e).unwrap();
        for q in 1..=universe {
            let a = sketch.query(q);
            let b = runner.estimate(q).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
    assert_eq!(runner.state.values, sketch.counters);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cms_emulation_matches_baseline(seed in 0u64..1000, w in 1usize..12, d in 1usize..4, delta in 0.1f64..2.0) {
        cms_equivalence(seed, w, d, delta);
    }

    #[test]
    fn cms_never_underestimates(seed in 0u64..1000, w in 1usize..16, d in 1usize..4) {
        let suite = stream_suite(&every_step(100), 50, 3, seed).unwrap();
        let mut cms = CountMinSketch::new(w, d, 1.0, &mut seeded(seed, &[1])).unwrap();
        for s in &suite {
            cms.reset();
            let mut seen = 0;
            for q in &s.queries {
                while seen < q.t {
                    cms.update(s.elements[seen]);
                    seen += 1;
                }
                prop_assert!(cms.query(q.element) >= q.count as f64);
            }
        }
    }
}
