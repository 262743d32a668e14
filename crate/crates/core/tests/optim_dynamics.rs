mod common;

use common::{gaussian, rng};
use frl_core::factorized::Factorization;
use frl_core::objectives::{factor_gradients, AffineDistance, Loss, MaskedCompletion, MatrixRegression, WhitenedRegression};
use frl_core::optim::{
    adamw_step, gd_step, momentum_wd_step, optimizer_step, run_training, Model, OptimizerConfig, OptimizerKind,
    OptimizerState,
};
use frl_core::oracles::fit_exponential_rate;
use frl_core::{Error, Matrix};
use rand::Rng;

fn scalar(x: f64) -> Matrix<f64> {
    Matrix::from_rows(&[[x]]).unwrap()
}

fn sweep_target() -> Matrix<f64> {
    Matrix::from_diag(&[0.2, 0.4, 0.6, 0.8, 1.0])
}

fn factorized(rng: &mut rand_chacha::ChaCha8Rng, m: usize, n: usize, r: usize, std: f64) -> Model<f64> {
    Model::Factorized(Factorization::new(gaussian(rng, m, r, std), gaussian(rng, n, r, std)).unwrap())
}

#[test]
fn gd_examples() {
    let cfg = OptimizerConfig::gd(0.1);
    let mut p = scalar(1.0);
    gd_step(&mut [&mut p], &[scalar(0.0)], &cfg).unwrap();
    assert_eq!(p[(0, 0)], 1.0);
    gd_step(&mut [&mut p], &[scalar(2.0)], &cfg).unwrap();
    assert!((p[(0, 0)] - 0.8).abs() < 1e-15);

    let mut one = scalar(0.3);
    let mut two = scalar(0.3);
    gd_step(&mut [&mut one], &[scalar(1.5)], &OptimizerConfig::gd(0.2)).unwrap();
    let half = OptimizerConfig::gd(0.1);
    gd_step(&mut [&mut two], &[scalar(1.5)], &half).unwrap();
    gd_step(&mut [&mut two], &[scalar(1.5)], &half).unwrap();
    assert!((one[(0, 0)] - two[(0, 0)]).abs() < 1e-15);
}

#[test]
fn non_finite_gradient_diverges() {
    let mut p = scalar(1.0);
    let r = gd_step(&mut [&mut p], &[scalar(f64::NAN)], &OptimizerConfig::gd(0.1));
    assert!(matches!(r, Err(Error::Diverged { .. })));
    let r = gd_step(&mut [&mut p], &[Matrix::zeros(2, 1)], &OptimizerConfig::gd(0.1));
    assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
}

#[test]
fn momentum_reduces_to_gd_with_decoupled_decay() {
    let mut cfg = OptimizerConfig::new(OptimizerKind::MomentumWd, 0.1);
    cfg.weight_decay = 0.5;
    let mut p = scalar(2.0);
    let mut state = OptimizerState::new(&[&mut p], 0);
    momentum_wd_step(&mut [&mut p], &[scalar(1.0)], &mut state, &cfg).unwrap();
    assert!((p[(0, 0)] - (2.0 - 0.1 * (1.0 + 0.5 * 2.0))).abs() < 1e-15);

    let mut q = scalar(2.0);
    let mut state = OptimizerState::new(&[&mut q], 0);
    for _ in 0..10 {
        momentum_wd_step(&mut [&mut q], &[scalar(0.0)], &mut state, &cfg).unwrap();
    }
    assert!((q[(0, 0)] - 2.0 * 0.95f64.powi(10)).abs() < 1e-14);
}

#[test]
fn adamw_examples() {
    let mut cfg = OptimizerConfig::new(OptimizerKind::Adamw, 0.01);
    cfg.weight_decay = 0.1;
    cfg.epsilon = 1e-3;
    let w0 = 0.7;
    let g = -0.4;
    let mut w = scalar(w0);
    let mut state = OptimizerState::new(&[&mut w], 0);
    adamw_step(&mut [&mut w], &[scalar(g)], &mut state, &cfg).unwrap();
    let expected = w0 - 0.01 * (g / (g.abs() + 1e-3) + 0.1 * w0);
    assert!((w[(0, 0)] - expected).abs() < 1e-15);
    assert_eq!(state.step_count(), 1);

    let mut z = scalar(w0);
    let mut state = OptimizerState::new(&[&mut z], 0);
    for _ in 0..25 {
        adamw_step(&mut [&mut z], &[scalar(0.0)], &mut state, &cfg).unwrap();
    }
    assert!((z[(0, 0)] - w0 * (1.0 - 0.01 * 0.1f64).powi(25)).abs() < 1e-14);
}

#[test]
fn adamw_update_is_bounded() {
    let mut r = rng(90);
    let mut cfg = OptimizerConfig::new(OptimizerKind::Adamw, 0.05);
    cfg.weight_decay = 0.3;
    let mut w = gaussian(&mut r, 3, 4, 2.0);
    let mut state = OptimizerState::new(&[&mut w], 0);
    for _ in 0..500 {
        let scale = r.random_range(1e-6..1e3);
        let g = gaussian(&mut r, 3, 4, scale);
        let before = w.clone();
        adamw_step(&mut [&mut w], &[g], &mut state, &cfg).unwrap();
        for (a, b) in before.as_slice().iter().zip(w.as_slice()) {
            assert!((a - b).abs() <= 0.05 * (1.0 + 0.3 * a.abs()) * (1.0 + 1e-12));
        }
    }
}

#[test]
fn plain_adam_ignores_weight_decay() {
    let mut cfg = OptimizerConfig::new(OptimizerKind::Adam, 0.01);
    cfg.weight_decay = 5.0;
    let mut w = scalar(1.0);
    let mut state = OptimizerState::new(&[&mut w], 0);
    optimizer_step(&mut [&mut w], &[scalar(0.0)], &mut state, &cfg).unwrap();
    assert_eq!(w[(0, 0)], 1.0);
}

#[test]
fn gradient_clipping_limits_global_norm() {
    let mut cfg = OptimizerConfig::gd(1.0);
    cfg.grad_clip = Some(1.0);
    let mut a = scalar(0.0);
    let mut b = scalar(0.0);
    let mut state = OptimizerState::new(&[&mut a, &mut b], 0);
    optimizer_step(&mut [&mut a, &mut b], &[scalar(3.0), scalar(4.0)], &mut state, &cfg).unwrap();
    assert!((a[(0, 0)] + 0.6).abs() < 1e-15 && (b[(0, 0)] + 0.8).abs() < 1e-15);
}

#[test]
fn zero_steps_gives_initial_record() {
    let mut r = rng(91);
    let mut model = factorized(&mut r, 3, 3, 3, 0.5);
    let before = model.clone();
    let loss = MatrixRegression::new(Matrix::identity(3), 0.5).unwrap();
    let trace = run_training(&mut model, &loss, 0.1, &OptimizerConfig::gd(0.01), 0, 1).unwrap();
    assert_eq!(trace.len(), 1);
    assert_eq!(trace.records[0].step, 0);
    assert_eq!(model, before);
}

#[test]
fn recording_schedule_includes_final_step() {
    let mut r = rng(92);
    let mut model = factorized(&mut r, 3, 3, 3, 0.5);
    let loss = MatrixRegression::new(Matrix::identity(3), 0.5).unwrap();
    let trace = run_training(&mut model, &loss, 0.1, &OptimizerConfig::gd(0.01), 25, 10).unwrap();
    let steps: Vec<usize> = trace.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 10, 20, 25]);
    assert!(run_training(&mut model, &loss, 0.1, &OptimizerConfig::gd(0.01), 5, 0).is_err());
}

#[test]
fn identical_seeds_give_identical_traces() {
    let loss = MatrixRegression::new(sweep_target(), 0.5).unwrap();
    let mut cfg = OptimizerConfig::new(OptimizerKind::MomentumWd, 1e-2);
    cfg.momentum = 0.5;
    cfg.weight_decay = 0.1;
    cfg.noise_sigma = 0.05;
    cfg.seed = 17;
    let run = |seed: u64| {
        let mut r = rng(93);
        let mut model = factorized(&mut r, 5, 5, 5, 0.1);
        let mut c = cfg.clone();
        c.seed = seed;
        run_training(&mut model, &loss, 0.0, &c, 300, 7).unwrap()
    };
    assert_eq!(run(17), run(17));
    assert_ne!(run(17), run(18));
}

#[test]
fn divergence_carries_partial_trace() {
    let loss = MatrixRegression::new(scalar(1.0), 0.5).unwrap();
    let mut model = Model::Direct(scalar(2.0));
    match run_training(&mut model, &loss, 0.0, &OptimizerConfig::gd(1e3), 10_000, 1) {
        Err(Error::Diverged { step, partial }) => {
            assert!(step > 1);
            assert_eq!(partial.records[0].step, 0);
            assert!(partial.records.iter().all(|r| r.loss.is_finite()));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

fn check_balance_envelope(loss: &dyn Loss<f64>, mut model: Model<f64>, eta: f64, lambda: f64) {
    let cfg = OptimizerConfig::gd(eta);
    let trace = run_training(&mut model, loss, lambda, &cfg, 1000, 1).unwrap();
    let q0 = trace.records[0].balance_gap_fro;
    for r in &trace.records {
        let envelope = q0 * (1.0 - 2.0 * eta * lambda).powi(r.step as i32) * 1.05;
        assert!(
            r.balance_gap_fro <= envelope,
            "step {}: {} > {envelope} (eta {eta}, lambda {lambda})",
            r.step,
            r.balance_gap_fro
        );
    }
}

#[test]
fn balance_gap_decays_at_least_geometrically() {
    let mut r = rng(100);
    let d = gaussian(&mut r, 4, 4, 1.0);
    let mask = Matrix::from_fn(4, 4, |i, j| ((i + 2 * j) % 3 != 0) as u8 as f64);
    let sxx = {
        let g = gaussian(&mut r, 4, 4, 0.5);
        let mut s = g.t_matmul(&g).unwrap();
        s.axpy(0.5, &Matrix::identity(4)).unwrap();
        s
    };
    let losses: Vec<Box<dyn Loss<f64>>> = vec![
        Box::new(MatrixRegression::new(sweep_target(), 0.5).unwrap()),
        Box::new(MatrixRegression::new(d.clone(), 1.0).unwrap()),
        Box::new(MaskedCompletion::new(d.clone(), mask).unwrap()),
        Box::new(WhitenedRegression::new(d, sxx).unwrap()),
    ];
    let shapes = [(5, 5, 5), (4, 4, 2), (4, 4, 4), (4, 4, 3)];
    for (loss, &(m, n, k)) in losses.iter().zip(&shapes) {
        for &(eta, lambda) in &[(1e-3, 0.2), (1e-3, 0.8), (1e-2, 0.1), (1e-2, 0.4)] {
            for &std in &[0.1, 0.5] {
                let model = factorized(&mut r, m, n, k, std);
                check_balance_envelope(loss.as_ref(), model, eta, lambda);
            }
        }
    }
    let hyperplane = AffineDistance::new(vec![1.0, 2.0, -0.5, 0.3], 1.0).unwrap();
    for &(eta, lambda) in &[(1e-3, 0.3), (1e-2, 0.2)] {
        check_balance_envelope(&hyperplane, factorized(&mut r, 2, 2, 2, 0.7), eta, lambda);
    }
}

#[test]
fn balance_conserved_without_regularization() {
    let mut r = rng(101);
    let loss = MatrixRegression::new(sweep_target(), 0.5).unwrap();
    for _ in 0..5 {
        let mut model = factorized(&mut r, 5, 5, 5, 0.5);
        let trace = run_training(&mut model, &loss, 0.0, &OptimizerConfig::gd(1e-3), 1000, 10).unwrap();
        let q0 = trace.records[0].balance_gap_fro;
        for rec in &trace.records {
            assert!((rec.balance_gap_fro - q0).abs() <= 0.01 * q0, "step {}", rec.step);
        }
    }
}

#[test]
fn fitted_decay_rate_matches_discrete_prediction() {
    let mut r = rng(102);
    let loss = MatrixRegression::new(sweep_target(), 0.5).unwrap();
    for &(eta, lambda) in &[(1e-2, 0.2), (1e-2, 0.6), (1e-3, 0.4)] {
        let mut model = factorized(&mut r, 5, 5, 5, 0.1);
        let trace = run_training(&mut model, &loss, lambda, &OptimizerConfig::gd(eta), 500, 1).unwrap();
        let series: Vec<f64> = trace.records.iter().map(|r| r.balance_gap_fro).collect();
        let fitted = fit_exponential_rate(&series, 0..501).unwrap();
        let expected = -(1.0 - 2.0 * eta * lambda).ln();
        assert!(((fitted - expected) / expected).abs() < 0.05, "{fitted} vs {expected}");
    }
}

#[test]
fn noisy_momentum_settles_at_a_floor() {
    let mut r = rng(103);
    let loss = MatrixRegression::new(sweep_target(), 0.5).unwrap();
    let a = gaussian(&mut r, 5, 5, 1.0);
    let b = gaussian(&mut r, 5, 5, 0.1);
    let mut model = Model::Factorized(Factorization::new(a, b).unwrap());
    let mut cfg = OptimizerConfig::new(OptimizerKind::MomentumWd, 1e-2);
    cfg.momentum = 0.1;
    cfg.weight_decay = 0.5;
    cfg.noise_sigma = 0.05;
    cfg.seed = 5;
    let trace = run_training(&mut model, &loss, 0.0, &cfg, 6000, 10).unwrap();
    let q: Vec<f64> = trace.records.iter().map(|r| r.balance_gap_fro).collect();
    let tail = &q[q.len() / 2..];
    let mut sorted = tail.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let floor = sorted[sorted.len() / 2];
    assert!(floor > 0.0);
    assert!(q[0] > 10.0 * floor, "no decay: {} vs floor {floor}", q[0]);
    let worst = tail.iter().copied().fold(0.0, f64::max);
    assert!(worst <= 5.0 * floor, "{worst} vs floor {floor}");
}

/// State of the continuous momentum system for a factor pair.
#[derive(Clone)]
struct Flow {
    a: Matrix<f64>,
    b: Matrix<f64>,
    ha: Matrix<f64>,
    hb: Matrix<f64>,
}

impl Flow {
    fn axpy(&self, h: f64, d: &Flow) -> Flow {
        let f = |x: &Matrix<f64>, y: &Matrix<f64>| {
            let mut out = x.clone();
            out.axpy(h, y).unwrap();
            out
        };
        Flow {
            a: f(&self.a, &d.a),
            b: f(&self.b, &d.b),
            ha: f(&self.ha, &d.ha),
            hb: f(&self.hb, &d.hb),
        }
    }
}

/// `dH/dt = κ(g − H)`, `dP/dt = −(H + λP)`.
fn flow_rhs(s: &Flow, loss: &dyn Loss<f64>, kappa: f64, decay: f64) -> Flow {
    let g = factor_gradients(&Factorization::new(s.a.clone(), s.b.clone()).unwrap(), loss, 0.0).unwrap();
    let dh = |g: &Matrix<f64>, h: &Matrix<f64>| g.sub(h).unwrap().scale(kappa);
    let dp = |h: &Matrix<f64>, p: &Matrix<f64>| {
        let mut out = h.scale(-1.0);
        out.axpy(-decay, p).unwrap();
        out
    };
    Flow {
        a: dp(&s.ha, &s.a),
        b: dp(&s.hb, &s.b),
        ha: dh(&g.grad_a, &s.ha),
        hb: dh(&g.grad_b, &s.hb),
    }
}

fn rk4(start: &Flow, loss: &dyn Loss<f64>, kappa: f64, decay: f64, h: f64, steps: usize, every: usize) -> Vec<Matrix<f64>> {
    let mut s = start.clone();
    let mut out = vec![s.a.matmul_t(&s.b).unwrap()];
    for k in 1..=steps {
        let k1 = flow_rhs(&s, loss, kappa, decay);
        let k2 = flow_rhs(&s.axpy(h / 2.0, &k1), loss, kappa, decay);
        let k3 = flow_rhs(&s.axpy(h / 2.0, &k2), loss, kappa, decay);
        let k4 = flow_rhs(&s.axpy(h, &k3), loss, kappa, decay);
        s = s
            .axpy(h / 6.0, &k1)
            .axpy(h / 3.0, &k2)
            .axpy(h / 3.0, &k3)
            .axpy(h / 6.0, &k4);
        if k % every == 0 {
            out.push(s.a.matmul_t(&s.b).unwrap());
        }
    }
    out
}

/// Max deviation of the discrete product from the reference, sampled at
/// every unit of continuous time up to `horizon`.
fn momentum_deviation(eta: f64, reference: &[Matrix<f64>], start: &Flow, loss: &dyn Loss<f64>, kappa: f64, decay: f64) -> f64 {
    let mut cfg = OptimizerConfig::new(OptimizerKind::MomentumWd, eta);
    cfg.momentum = kappa * eta;
    cfg.weight_decay = decay;
    let mut a = start.a.clone();
    let mut b = start.b.clone();
    let mut state = OptimizerState::new(&[&mut a, &mut b], 0);
    let per_unit = (1.0 / eta).round() as usize;
    let mut worst = 0.0f64;
    for k in 1..=per_unit * (reference.len() - 1) {
        let g = factor_gradients(&Factorization::new(a.clone(), b.clone()).unwrap(), loss, 0.0).unwrap();
        momentum_wd_step(&mut [&mut a, &mut b], &[g.grad_a, g.grad_b], &mut state, &cfg).unwrap();
        if k % per_unit == 0 {
            let w = a.matmul_t(&b).unwrap();
            worst = worst.max(w.sub(&reference[k / per_unit]).unwrap().max_abs());
        }
    }
    worst
}

#[test]
fn momentum_matches_continuous_reference() {
    let mut r = rng(104);
    let loss = MatrixRegression::new(Matrix::from_diag(&[1.0, 0.5, 0.25]), 0.5).unwrap();
    let start = Flow {
        a: gaussian(&mut r, 3, 3, 0.5),
        b: gaussian(&mut r, 3, 3, 0.5),
        ha: Matrix::zeros(3, 3),
        hb: Matrix::zeros(3, 3),
    };
    let (kappa, decay, horizon) = (2.0, 0.1, 100usize);
    let h = 1e-3;
    let reference = rk4(&start, &loss, kappa, decay, h, horizon * 1000, 1000);
    let coarse = momentum_deviation(1e-2, &reference, &start, &loss, kappa, decay);
    let fine = momentum_deviation(5e-3, &reference, &start, &loss, kappa, decay);
    assert!(coarse < 10.0 * 1e-2, "deviation {coarse}");
    assert!(fine < 10.0 * 5e-3, "deviation {fine}");
    // first-order convergence: halving η roughly halves the error
    assert!(fine < 0.7 * coarse, "{fine} vs {coarse}");
}
