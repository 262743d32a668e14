//! Discrete-time optimizers and the training loop that records traces.
//!
//! Update rules, element-wise:
//!
//! ```text
//! gd           p ← p − η g
//! momentum_wd  H ← (1 − μ) H + μ (g + σ ξ)
//!              p ← p − η (H + λ p)
//! adamw        t ← t + 1
//!              G ← β₁ G + (1 − β₁) g,  B ← β₂ B + (1 − β₂) g²
//!              p ← p − η (Ĝ / (√B̂ + ε) + λ p),  Ĝ = G/(1−β₁ᵗ), B̂ = B/(1−β₂ᵗ)
//! adam         adamw with λ = 0; an L2 term belongs in the gradient
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorized::{DeepChain, Factorization};
use crate::matrix::Matrix;
use crate::objectives::{chain_gradients, factor_gradients, Loss};
use crate::scalar::Scalar;
use crate::spectra::{nuclear_norm, pseudo_rank, singular_values, DEFAULT_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Gd,
    MomentumWd,
    Adam,
    Adamw,
}

/// Hyperparameters for every optimizer kind. Fields that a kind does not use
/// are kept so that traces can be reproduced from the stored config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub step_size: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_momentum() -> f64 {
    1.0
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, step_size: f64) -> Self {
        Self {
            kind,
            step_size,
            weight_decay: 0.0,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            noise_sigma: 0.0,
            grad_clip: None,
            seed: 0,
        }
    }

    pub fn gd(step_size: f64) -> Self {
        Self::new(OptimizerKind::Gd, step_size)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive and finite, got {x}")))
            }
        };
        let non_negative = |field: &str, x: f64| {
            if x >= 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be non-negative and finite, got {x}")))
            }
        };
        let unit = |field: &str, x: f64| {
            if (0.0..1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::config(field, format!("must lie in [0, 1), got {x}")))
            }
        };
        positive("step_size", self.step_size)?;
        non_negative("weight_decay", self.weight_decay)?;
        non_negative("noise_sigma", self.noise_sigma)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        positive("epsilon", self.epsilon)?;
        if let Some(c) = self.grad_clip {
            positive("grad_clip", c)?;
        }
        if self.kind == OptimizerKind::MomentumWd && !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::config(
                "momentum",
                format!("must lie in (0, 1], got {}", self.momentum),
            ));
        }
        Ok(())
    }
}

/// Per-parameter accumulators plus the step counter and noise stream.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
    t: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero accumulators shaped like `params`.
    pub fn new(params: &[&mut Matrix<T>], seed: u64) -> Self {
        let zeros: Vec<Matrix<T>> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Momentum buffer `H` or Adam's first moment `G`.
    pub fn first_moments(&self) -> &[Matrix<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Matrix<T>] {
        &self.second
    }

    fn check(&self, params: &[&mut Matrix<T>]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::InvalidArgument(format!(
                "state tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (p, h) in params.iter().zip(&self.first) {
            if p.shape() != h.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer state",
                    left: p.shape(),
                    right: h.shape(),
                });
            }
        }
        Ok(())
    }
}

fn diverged(step: u64) -> Error {
    Error::Diverged {
        step: step as usize,
        partial: Box::default(),
    }
}

/// Shape-checks, clips by global norm if configured, and rejects non-finite
/// gradients.
fn prepare<T: Scalar>(
    params: &[&mut Matrix<T>],
    grads: &[Matrix<T>],
    config: &OptimizerConfig,
    step: u64,
) -> Result<Vec<Matrix<T>>> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer step",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    let mut grads = grads.to_vec();
    if let Some(clip) = config.grad_clip {
        let norm = grads.iter().map(|g| g.frobenius_sq()).sum::<T>().sqrt();
        let clip = T::lit(clip);
        if norm > clip {
            let factor = clip / norm;
            for g in &mut grads {
                *g = g.scale(factor);
            }
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(diverged(step));
    }
    Ok(grads)
}

pub fn gd_step<T: Scalar>(
    params: &mut [&mut Matrix<T>],
    grads: &[Matrix<T>],
    config: &OptimizerConfig,
) -> Result<()> {
    let grads = prepare(params, grads, config, 0)?;
    let eta = T::lit(config.step_size);
    for (p, g) in params.iter_mut().zip(&grads) {
        p.axpy(-eta, g)?;
    }
    Ok(())
}

pub fn momentum_wd_step<T: Scalar>(
    params: &mut [&mut Matrix<T>],
    grads: &[Matrix<T>],
    state: &mut OptimizerState<T>,
    config: &OptimizerConfig,
) -> Result<()> {
    state.check(params)?;
    let grads = prepare(params, grads, config, state.t)?;
    state.t += 1;
    let eta = T::lit(config.step_size);
    let mu = T::lit(config.momentum);
    let decay = T::lit(config.weight_decay);
    let sigma = config.noise_sigma;
    let keep = T::one() - mu;
    for ((p, g), h) in params.iter_mut().zip(&grads).zip(&mut state.first) {
        let ps = p.as_mut_slice();
        for ((pi, &gi), hi) in ps.iter_mut().zip(g.as_slice()).zip(h.as_mut_slice()) {
            let noise = if sigma > 0.0 {
                let xi: f64 = StandardNormal.sample(&mut state.rng);
                T::lit(sigma * xi)
            } else {
                T::zero()
            };
            *hi = keep * *hi + mu * (gi + noise);
            *pi -= eta * (*hi + decay * *pi);
        }
    }
    Ok(())
}

pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Matrix<T>],
    grads: &[Matrix<T>],
    state: &mut OptimizerState<T>,
    config: &OptimizerConfig,
) -> Result<()> {
    adam_update(params, grads, state, config, T::lit(config.weight_decay))
}

fn adam_update<T: Scalar>(
    params: &mut [&mut Matrix<T>],
    grads: &[Matrix<T>],
    state: &mut OptimizerState<T>,
    config: &OptimizerConfig,
    decay: T,
) -> Result<()> {
    state.check(params)?;
    let grads = prepare(params, grads, config, state.t)?;
    state.t += 1;
    let t = state.t as i32;
    let eta = T::lit(config.step_size);
    let b1 = T::lit(config.beta1);
    let b2 = T::lit(config.beta2);
    let eps = T::lit(config.epsilon);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(&grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        let iter = p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice());
        for (((pi, &gi), mi), vi) in iter {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= eta * (m_hat / (v_hat.sqrt() + eps) + decay * *pi);
        }
    }
    Ok(())
}

/// Dispatches on `config.kind`. Plain Adam ignores `weight_decay`.
pub fn optimizer_step<T: Scalar>(
    params: &mut [&mut Matrix<T>],
    grads: &[Matrix<T>],
    state: &mut OptimizerState<T>,
    config: &OptimizerConfig,
) -> Result<()> {
    match config.kind {
        OptimizerKind::Gd => {
            gd_step(params, grads, config).map_err(|e| match e {
                Error::Diverged { partial, .. } => Error::Diverged {
                    step: state.t as usize,
                    partial,
                },
                e => e,
            })?;
            state.t += 1;
            Ok(())
        }
        OptimizerKind::MomentumWd => momentum_wd_step(params, grads, state, config),
        OptimizerKind::Adam => adam_update(params, grads, state, config, T::zero()),
        OptimizerKind::Adamw => adamw_step(params, grads, state, config),
    }
}

/// A trainable parametrization of `W`.
#[derive(Debug, Clone, PartialEq)]
pub enum Model<T> {
    /// `W = ABᵀ` with penalty `(λ/2)(‖A‖² + ‖B‖²)`.
    Factorized(Factorization<T>),
    /// `W = A₁⋯A_L` with penalty `(λ/2)Σ‖A_l‖²`.
    Chain(DeepChain<T>),
    /// `W` itself with penalty `(λ/2)‖W‖²`.
    Direct(Matrix<T>),
    /// `W = u ⊙ v` with penalty `(λ/2)(‖u‖² + ‖v‖²)`, the diagonal case of
    /// the factorized model.
    Hadamard { u: Matrix<T>, v: Matrix<T> },
}

impl<T: Scalar> Model<T> {
    pub fn hadamard(u: Matrix<T>, v: Matrix<T>) -> Result<Self> {
        if u.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "hadamard model",
                left: u.shape(),
                right: v.shape(),
            });
        }
        Ok(Model::Hadamard { u, v })
    }

    pub fn product(&self) -> Matrix<T> {
        match self {
            Model::Factorized(f) => f.product(),
            Model::Chain(c) => c.product(),
            Model::Direct(w) => w.clone(),
            Model::Hadamard { u, v } => u.hadamard(v).expect("same shape"),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        match self {
            Model::Factorized(f) => {
                let (a, b) = f.parts_mut();
                vec![a, b]
            }
            Model::Chain(c) => c.layers_mut().iter_mut().collect(),
            Model::Direct(w) => vec![w],
            Model::Hadamard { u, v } => vec![u, v],
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Model::Factorized(f) => f.a().is_finite() && f.b().is_finite(),
            Model::Chain(c) => c.layers().iter().all(Matrix::is_finite),
            Model::Direct(w) => w.is_finite(),
            Model::Hadamard { u, v } => u.is_finite() && v.is_finite(),
        }
    }

    /// Gradients of `L(W) + penalty` in every parameter, in `params_mut` order.
    pub fn gradients<L: Loss<T> + ?Sized>(&self, loss: &L, lambda: T) -> Result<Vec<Matrix<T>>> {
        match self {
            Model::Factorized(f) => {
                let g = factor_gradients(f, loss, lambda)?;
                Ok(vec![g.grad_a, g.grad_b])
            }
            Model::Chain(c) => chain_gradients(c, loss, lambda),
            Model::Direct(w) => {
                let mut g = loss.gradient(w)?;
                g.axpy(lambda, w)?;
                Ok(vec![g])
            }
            Model::Hadamard { u, v } => {
                let g = loss.gradient(&u.hadamard(v)?)?;
                let mut gu = g.hadamard(v)?;
                gu.axpy(lambda, u)?;
                let mut gv = g.hadamard(u)?;
                gv.axpy(lambda, v)?;
                Ok(vec![gu, gv])
            }
        }
    }

    /// Snapshot of the diagnostics at `step`.
    pub fn record<L: Loss<T> + ?Sized>(
        &self,
        step: usize,
        loss: &L,
        lambda: T,
        threshold: T,
    ) -> Result<TraceRecord> {
        let w = self.product();
        let base = loss.value(&w)?;
        let half = T::lit(0.5);
        let (penalty, surrogate, balance, s) = match self {
            Model::Factorized(f) => {
                let s = singular_values(&w)?;
                let nuc: T = s.iter().copied().sum();
                (f.half_frobenius_sum(), nuc, f.balance_gap().frobenius(), s)
            }
            Model::Chain(c) => {
                let s = singular_values(&w)?;
                let depth = T::lit(c.depth() as f64);
                let p = T::lit(2.0) / depth;
                let schatten: T = s.iter().map(|&x| if x > T::zero() { x.powf(p) } else { T::zero() }).sum();
                (
                    half * depth * c.mean_frobenius_sq(),
                    half * depth * schatten,
                    c.balance_epsilon()?,
                    s,
                )
            }
            Model::Direct(_) => {
                let s = singular_values(&w)?;
                let pen = half * w.frobenius_sq();
                (pen, pen, T::zero(), s)
            }
            Model::Hadamard { u, v } => {
                let mut s: Vec<T> = w.as_slice().iter().map(|x| x.abs()).collect();
                s.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                let l1: T = s.iter().copied().sum();
                let q = u.hadamard(u)?.sub(&v.hadamard(v)?)?;
                (half * (u.frobenius_sq() + v.frobenius_sq()), l1, q.frobenius(), s)
            }
        };
        let pr = pseudo_rank(&s, threshold)?;
        Ok(TraceRecord {
            step,
            loss: base.as_f64(),
            l2_loss: (base + lambda * penalty).as_f64(),
            nuclear_loss: (base + lambda * surrogate).as_f64(),
            balance_gap_fro: balance.as_f64(),
            reg_gap: (surrogate - penalty).abs().as_f64(),
            pseudo_rank: pr.as_f64(),
            singular_values: s.iter().map(|x| x.as_f64()).collect(),
        })
    }
}

/// One row of a training trace. `reg_gap` is the unscaled
/// `|‖W‖_* − ½(‖A‖² + ‖B‖²)|` (or its chain and diagonal analogues) and
/// `balance_gap_fro` is `‖AᵀA − BᵀB‖_F` (or the chain's ε).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub l2_loss: f64,
    pub nuclear_loss: f64,
    pub balance_gap_fro: f64,
    pub reg_gap: f64,
    pub pseudo_rank: f64,
    pub singular_values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// `(step, value)` pairs for one scalar column.
    pub fn column(&self, f: impl Fn(&TraceRecord) -> f64) -> Vec<(usize, f64)> {
        self.records.iter().map(|r| (r.step, f(r))).collect()
    }
}

/// Trains `model` in place for `steps` optimizer steps, recording at step 0
/// and every `record_every` steps after that (and at the final step).
pub fn run_training<T: Scalar, L: Loss<T> + ?Sized>(
    model: &mut Model<T>,
    loss: &L,
    lambda: T,
    config: &OptimizerConfig,
    steps: usize,
    record_every: usize,
) -> Result<Trace> {
    run_training_with_threshold(model, loss, lambda, config, steps, record_every, T::lit(DEFAULT_THRESHOLD))
}

pub fn run_training_with_threshold<T: Scalar, L: Loss<T> + ?Sized>(
    model: &mut Model<T>,
    loss: &L,
    lambda: T,
    config: &OptimizerConfig,
    steps: usize,
    record_every: usize,
    threshold: T,
) -> Result<Trace> {
    config.validate()?;
    if record_every == 0 {
        return Err(Error::config("record_every", "must be at least 1"));
    }
    if !(lambda >= T::zero()) {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    let mut trace = Trace::default();
    trace.records.push(model.record(0, loss, lambda, threshold)?);
    let mut state = OptimizerState::new(&model.params_mut(), config.seed);

    for step in 1..=steps {
        let grads = model.gradients(loss, lambda)?;
        let outcome = optimizer_step(&mut model.params_mut(), &grads, &mut state, config);
        let failed = match outcome {
            Ok(()) => !model.is_finite(),
            Err(Error::Diverged { .. }) => true,
            Err(e) => return Err(e),
        };
        if failed {
            return Err(Error::Diverged {
                step,
                partial: Box::new(trace),
            });
        }
        if step % record_every == 0 || step == steps {
            let rec = model.record(step, loss, lambda, threshold)?;
            if !rec.loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    partial: Box::new(trace),
                });
            }
            trace.records.push(rec);
        }
    }
    Ok(trace)
}

/// Nuclear norm of the model's `W` (L1 norm for the diagonal model).
pub fn model_nuclear<T: Scalar>(model: &Model<T>) -> Result<T> {
    match model {
        Model::Hadamard { u, v } => Ok(u.hadamard(v)?.as_slice().iter().map(|x| x.abs()).sum()),
        m => nuclear_norm(&m.product()),
    }
}
