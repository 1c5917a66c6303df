use learnds::diffsort::{
    apply_permutation, hard_sort, soft_sort, soft_sort_var, sortedness, SortMode,
};
use learnds_autodiff::gradcheck::max_gradient_error;
use learnds_autodiff::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Position of every element by counting the elements that must precede it.
fn counting_order(ranks: &[f64]) -> Vec<usize> {
    let mut order = vec![0; ranks.len()];
    for (j, &r) in ranks.iter().enumerate() {
        let pos = ranks
            .iter()
            .enumerate()
            .filter(|&(k, &s)| s < r || (s == r && k < j))
            .count();
        order[pos] = j;
    }
    order
}

#[test]
fn hard_sort_agrees_with_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..20);
        // a coarse grid forces plenty of ties
        let ranks: Vec<f64> = (0..n).map(|_| rng.gen_range(-4..4) as f64 * 0.5).collect();
        let p = hard_sort(&ranks).unwrap();
        assert_eq!(p.order().unwrap(), counting_order(&ranks).as_slice());
        assert_eq!(p.mode(), SortMode::Hard);
        for i in 0..n {
            assert_eq!(p.row(i).iter().sum::<f64>(), 1.0);
            assert_eq!((0..n).map(|r| p.row(r)[i]).sum::<f64>(), 1.0);
        }
    }
}

#[test]
fn soft_rows_sum_to_one_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let n = rng.gen_range(1..40);
        let ranks: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let tau = 10f64.powf(rng.gen_range(-3.0..1.0));
        let p = soft_sort(&ranks, tau).unwrap();
        for i in 0..n {
            let row = p.row(i);
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

fn gapped_ranks(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(n);
    let mut x = rng.gen_range(-5.0..0.0);
    for _ in 0..n {
        v.push(x);
        x += 1e-2 + rng.gen_range(0.0..0.5);
    }
    v.shuffle(rng);
    v
}

#[test]
fn small_temperature_rounds_to_hard_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1000 {
        let n = rng.gen_range(2..30);
        let ranks = gapped_ranks(&mut rng, n);
        let soft = soft_sort(&ranks, 1e-3).unwrap();
        let hard = hard_sort(&ranks).unwrap();
        assert_eq!(soft.row_argmax(), hard.order().unwrap());
    }
}

#[test]
fn resorting_sorted_data_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let n = rng.gen_range(1..30);
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = hard_sort(&data).unwrap();
        let sorted = apply_permutation(&p, &data, 1).unwrap();
        let again = hard_sort(&sorted).unwrap();
        assert_eq!(again.order().unwrap(), (0..n).collect::<Vec<_>>().as_slice());
        assert_eq!(sortedness(&p, &data).unwrap(), 1.0);
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain, counter-clockwise.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

#[test]
fn soft_outputs_lie_in_the_convex_hull() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..200 {
        let n = rng.gen_range(3..12);
        let ranks: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p = soft_sort(&ranks, rng.gen_range(0.05..3.0)).unwrap();

        let d1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (lo, hi) = d1.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        for x in apply_permutation(&p, &d1, 1).unwrap() {
            assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
        }

        let d2: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hull = convex_hull(d2.chunks(2).map(|c| (c[0], c[1])).collect());
        for c in apply_permutation(&p, &d2, 2).unwrap().chunks(2) {
            let pt = (c[0], c[1]);
            for i in 0..hull.len() {
                let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
                assert!(cross(a, b, pt) >= -1e-9, "point outside hull");
            }
        }
    }
}

#[test]
fn sorted_rows_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..20 {
        let (b, n, d) = (2, rng.gen_range(2..7), 2);
        let ranks = Tensor::new(vec![b, n], (0..b * n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let data = Tensor::new(vec![b, n, d], (0..b * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::new(vec![b, n, d], (0..b * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let tau = rng.gen_range(0.3..2.0);
        let err = max_gradient_error(&[ranks], 1e-6, |tape, vars| {
            let p = soft_sort_var(tape, vars[0], tau).map_err(|e| match e {
                learnds::Error::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            let dv = tape.constant(data.clone())?;
            let out = tape.bmm(p, dv, false)?;
            let wv = tape.constant(w.clone())?;
            let prod = tape.mul(out, wv)?;
            tape.sum(prod)
        })
        .unwrap();
        assert!(err < 1e-4, "gradient error {err}");
    }
}

proptest! {
    #[test]
    fn soft_sort_is_row_stochastic(
        ranks in prop::collection::vec(-1e3f64..1e3, 1..25),
        log_tau in -4.0f64..2.0,
    ) {
        let p = soft_sort(&ranks, 10f64.powf(log_tau)).unwrap();
        for i in 0..ranks.len() {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn hard_sort_gathers_rows_exactly(ranks in prop::collection::vec(-10f64..10.0, 1..20)) {
        let p = hard_sort(&ranks).unwrap();
        let out = apply_permutation(&p, &ranks, 1).unwrap();
        prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assert_eq!(out, sorted);
    }
}
