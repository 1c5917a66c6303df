use learnds_autodiff::{AdamConfig, AdamState, Tape, Tensor};

/// Hand-rolled scalar Adam used as the reference.
struct ScalarAdam {
    lr: f64,
    wd: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    fn step(&mut self, x: f64, g: f64) -> f64 {
        self.t += 1;
        self.m = 0.9 * self.m + 0.1 * g;
        self.v = 0.999 * self.v + 0.001 * g * g;
        let mh = self.m / (1.0 - 0.9f64.powi(self.t));
        let vh = self.v / (1.0 - 0.999f64.powi(self.t));
        x - self.lr * mh / (vh.sqrt() + 1e-8) - self.lr * self.wd * x
    }
}

#[test]
fn quadratic_bowl_trace_matches_scalar_reference() {
    // f(x) = sum_i c_i (x_i - a_i)^2
    let centers = [1.5, -0.5, 3.0];
    let curv = [1.0, 4.0, 0.25];
    let cfg = AdamConfig {
        lr: 0.05,
        weight_decay: 1e-3,
        ..Default::default()
    };
    let mut params = vec![Tensor::new(vec![3], vec![0.0, 2.0, -1.0]).unwrap()];
    let mut state = AdamState::new(cfg, &params);
    let mut refs: Vec<(f64, ScalarAdam)> = params[0]
        .data()
        .iter()
        .map(|&x| (x, ScalarAdam { lr: 0.05, wd: 1e-3, m: 0.0, v: 0.0, t: 0 }))
        .collect();

    for _ in 0..10 {
        let mut tape = Tape::new();
        let x = tape.param(params[0].clone()).unwrap();
        let a = tape.constant(Tensor::new(vec![3], centers.to_vec()).unwrap()).unwrap();
        let c = tape.constant(Tensor::new(vec![3], curv.to_vec()).unwrap()).unwrap();
        let d = tape.sub(x, a).unwrap();
        let d2 = tape.square(d).unwrap();
        let w = tape.mul(d2, c).unwrap();
        let loss = tape.sum(w).unwrap();
        let g = tape.backward(loss).unwrap().wrt(x);
        state.step(&mut params, &[Some(g)]).unwrap();

        for (i, (x, opt)) in refs.iter_mut().enumerate() {
            let grad = 2.0 * curv[i] * (*x - centers[i]);
            *x = opt.step(*x, grad);
        }
    }
    for (i, (x, _)) in refs.iter().enumerate() {
        assert!((params[0].data()[i] - x).abs() <= 1e-10, "coord {i}");
    }
    assert_eq!(state.step, 10);
}
