use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorized::{DeepChain, Factorization};
use crate::matrix::Matrix;
use crate::objectives::{AffineDistance, Loss, MaskedCompletion, MatrixRegression, WhitenedRegression};
use crate::optim::{Model, OptimizerConfig};
use crate::spectra::DEFAULT_THRESHOLD;

/// One sweep over a grid of regularization strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub loss: LossSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub init: InitSpec,
    pub optimizer: OptimizerConfig,
    pub lambda_grid: Vec<f64>,
    pub steps: usize,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    pub output_dir: PathBuf,
    /// Inclusive step range used to fit the balance-decay rate.
    #[serde(default = "default_rate_window")]
    pub rate_window: [usize; 2],
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Run cells on the rayon pool. Outputs do not depend on this flag.
    #[serde(default)]
    pub parallel: bool,
}

fn default_record_every() -> usize {
    1
}

fn default_rate_window() -> [usize; 2] {
    [50, 500]
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_scale() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    /// `scale·‖W − D‖²`
    Regression {
        target: Vec<Vec<f64>>,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    MaskedCompletion {
        target: Vec<Vec<f64>>,
        mask: Vec<Vec<f64>>,
    },
    WhitenedRegression {
        sigma_yx: Vec<Vec<f64>>,
        sigma_xx: Vec<Vec<f64>>,
    },
    AffineDistance {
        normal: Vec<f64>,
        offset: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `W = ABᵀ`, `A` is rows×rank and `B` is cols×rank.
    Factorized { rows: usize, cols: usize, rank: usize },
    /// `W = A₁⋯A_L` with `A_l` of shape `dims[l−1]×dims[l]`.
    Chain { dims: Vec<usize> },
    Direct { rows: usize, cols: usize },
    /// `w = u ⊙ v` with `u, v` of length `len`.
    ScalarProduct { len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitDistribution {
    Gaussian,
    Uniform,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub distribution: InitDistribution,
    /// Standard deviation (gaussian) or half-width (uniform).
    pub scale: f64,
    pub seed: u64,
    /// Parameter matrices for the explicit distribution, in model order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<Vec<Vec<f64>>>>,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            distribution: InitDistribution::Gaussian,
            scale: 0.1,
            seed: 0,
            params: None,
        }
    }
}

fn matrix_field(field: &str, rows: &[Vec<f64>]) -> Result<Matrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::config(field, "matrix must be non-empty"));
    }
    let m = Matrix::from_rows(rows).map_err(|e| Error::config(field, e.to_string()))?;
    if !m.is_finite() {
        return Err(Error::config(field, "matrix has non-finite entries"));
    }
    Ok(m)
}

impl LossSpec {
    pub fn build(&self) -> Result<Box<dyn Loss<f64>>> {
        let boxed: Box<dyn Loss<f64>> = match self {
            LossSpec::Regression { target, scale } => {
                let d = matrix_field("loss.target", target)?;
                Box::new(MatrixRegression::new(d, *scale).map_err(|e| Error::config("loss.scale", e.to_string()))?)
            }
            LossSpec::MaskedCompletion { target, mask } => {
                let d = matrix_field("loss.target", target)?;
                let m = matrix_field("loss.mask", mask)?;
                Box::new(MaskedCompletion::new(d, m).map_err(|e| Error::config("loss.mask", e.to_string()))?)
            }
            LossSpec::WhitenedRegression { sigma_yx, sigma_xx } => {
                let syx = matrix_field("loss.sigma_yx", sigma_yx)?;
                let sxx = matrix_field("loss.sigma_xx", sigma_xx)?;
                Box::new(
                    WhitenedRegression::new(syx, sxx)
                        .map_err(|e| Error::config("loss.sigma_xx", e.to_string()))?,
                )
            }
            LossSpec::AffineDistance { normal, offset } => Box::new(
                AffineDistance::new(normal.clone(), *offset)
                    .map_err(|e| Error::config("loss.normal", e.to_string()))?,
            ),
        };
        Ok(boxed)
    }

    /// Shape of `W` the loss expects, if it fixes one.
    fn shape(&self) -> Option<(usize, usize)> {
        match self {
            LossSpec::Regression { target, .. } | LossSpec::MaskedCompletion { target, .. } => {
                Some((target.len(), target.first().map_or(0, Vec::len)))
            }
            LossSpec::WhitenedRegression { sigma_yx, .. } => {
                Some((sigma_yx.len(), sigma_yx.first().map_or(0, Vec::len)))
            }
            LossSpec::AffineDistance { .. } => None,
        }
    }

    /// Target and scale when the loss is regression onto a diagonal matrix.
    pub fn diagonal_regression(&self) -> Option<(Matrix<f64>, f64)> {
        let LossSpec::Regression { target, scale } = self else {
            return None;
        };
        let d = Matrix::from_rows(target).ok()?;
        let diagonal = (0..d.rows()).all(|i| (0..d.cols()).all(|j| i == j || d[(i, j)] == 0.0));
        diagonal.then_some((d, *scale))
    }
}

impl ModelSpec {
    /// Shapes of the trainable parameters, in model order.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        match self {
            ModelSpec::Factorized { rows, cols, rank } => vec![(*rows, *rank), (*cols, *rank)],
            ModelSpec::Chain { dims } => dims.windows(2).map(|w| (w[0], w[1])).collect(),
            ModelSpec::Direct { rows, cols } => vec![(*rows, *cols)],
            ModelSpec::ScalarProduct { len } => vec![(1, *len), (1, *len)],
        }
    }

    fn product_shape(&self) -> (usize, usize) {
        match self {
            ModelSpec::Factorized { rows, cols, .. } | ModelSpec::Direct { rows, cols } => (*rows, *cols),
            ModelSpec::Chain { dims } => (dims[0], dims[dims.len() - 1]),
            ModelSpec::ScalarProduct { len } => (1, *len),
        }
    }

    fn validate(&self) -> Result<()> {
        if let ModelSpec::Chain { dims } = self {
            if dims.len() < 3 {
                return Err(Error::config("model.dims", "a chain needs at least 3 dims (2 layers)"));
            }
        }
        if self.param_shapes().iter().any(|&(r, c)| r == 0 || c == 0) {
            return Err(Error::config("model", "all dims must be positive"));
        }
        Ok(())
    }

    pub fn assemble(&self, mut params: Vec<Matrix<f64>>) -> Result<Model<f64>> {
        Ok(match self {
            ModelSpec::Factorized { .. } => {
                let b = params.pop().expect("two params");
                let a = params.pop().expect("two params");
                Model::Factorized(Factorization::new(a, b)?)
            }
            ModelSpec::Chain { .. } => Model::Chain(DeepChain::new(params)?),
            ModelSpec::Direct { .. } => Model::Direct(params.pop().expect("one param")),
            ModelSpec::ScalarProduct { .. } => {
                let v = params.pop().expect("two params");
                let u = params.pop().expect("two params");
                Model::hadamard(u, v)?
            }
        })
    }
}

impl InitSpec {
    /// Draws every parameter of `model` from a generator seeded with `seed`.
    pub fn sample(&self, model: &ModelSpec, seed: u64) -> Result<Vec<Matrix<f64>>> {
        let shapes = model.param_shapes();
        match self.distribution {
            InitDistribution::Explicit => {
                let params = self
                    .params
                    .as_ref()
                    .ok_or_else(|| Error::config("init.params", "required for the explicit distribution"))?;
                if params.len() != shapes.len() {
                    return Err(Error::config(
                        "init.params",
                        format!("expected {} matrices, got {}", shapes.len(), params.len()),
                    ));
                }
                params
                    .iter()
                    .zip(&shapes)
                    .map(|(p, &shape)| {
                        let m = matrix_field("init.params", p)?;
                        if m.shape() != shape {
                            return Err(Error::config(
                                "init.params",
                                format!("expected shape {shape:?}, got {:?}", m.shape()),
                            ));
                        }
                        Ok(m)
                    })
                    .collect()
            }
            InitDistribution::Gaussian => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, self.scale).map_err(|e| Error::config("init.scale", e.to_string()))?;
                Ok(shapes
                    .iter()
                    .map(|&(r, c)| Matrix::from_fn(r, c, |_, _| normal.sample(&mut rng)))
                    .collect())
            }
            InitDistribution::Uniform => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = self.scale;
                Ok(shapes
                    .iter()
                    .map(|&(r, c)| Matrix::from_fn(r, c, |_, _| rng.random_range(-s..=s)))
                    .collect())
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty file-name-safe string"));
        }
        if self.lambda_grid.is_empty() {
            return Err(Error::config("lambda_grid", "must be non-empty"));
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::config("lambda_grid", format!("entries must be finite and >= 0, got {l}")));
        }
        if self.record_every == 0 {
            return Err(Error::config("record_every", "must be at least 1"));
        }
        if self.rate_window[0] > self.rate_window[1] {
            return Err(Error::config("rate_window", "start must not exceed end"));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::config("threshold", "must lie in (0, 1]"));
        }
        if !(self.init.scale >= 0.0 && self.init.scale.is_finite()) {
            return Err(Error::config("init.scale", "must be finite and >= 0"));
        }
        self.optimizer.validate()?;
        self.model.validate()?;
        self.loss.build()?;
        let shape = self.model.product_shape();
        match (&self.loss, self.loss.shape()) {
            (_, Some(s)) if s != shape => Err(Error::config(
                "loss",
                format!("loss expects W of shape {s:?} but the model produces {shape:?}"),
            )),
            (LossSpec::AffineDistance { normal, .. }, _) if normal.len() != shape.0 * shape.1 => Err(
                Error::config("loss.normal", format!("length {} does not match W with {} entries", normal.len(), shape.0 * shape.1)),
            ),
            _ => Ok(()),
        }
    }

    /// Initial model for cell `index`, seeded with `init.seed + index`.
    pub fn initial_model(&self, index: usize) -> Result<Model<f64>> {
        let params = self.init.sample(&self.model, self.cell_seed(index))?;
        self.model.assemble(params)
    }

    pub fn cell_seed(&self, index: usize) -> u64 {
        self.init.seed.wrapping_add(index as u64)
    }

    /// Optimizer config for cell `index`; its noise seed is offset the same way.
    pub fn cell_optimizer(&self, index: usize) -> OptimizerConfig {
        let mut c = self.optimizer.clone();
        c.seed = c.seed.wrapping_add(index as u64);
        c
    }
}
