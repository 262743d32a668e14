//! Differentiable losses on a matrix `W` and the regularized objectives built
//! on top of them.
//!
//! For a factorization `W = ABᵀ` with strength `λ`:
//!
//! * `𝓛_L2(A, B) = L(ABᵀ) + (λ/2)(‖A‖² + ‖B‖²)`
//! * `𝓛_*(ABᵀ)  = L(ABᵀ) + λ‖ABᵀ‖_*`
//!
//! and `𝓛_* ≤ 𝓛_L2` always.

use crate::error::{Error, Result};
use crate::factorized::{prefix_product, DeepChain, Factorization};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::spectra::nuclear_norm;

/// A differentiable loss `L(W)` with its closed-form gradient `∂L/∂W`.
pub trait Loss<T: Scalar>: Send + Sync {
    fn value(&self, w: &Matrix<T>) -> Result<T>;

    fn gradient(&self, w: &Matrix<T>) -> Result<Matrix<T>>;
}

fn check_shape<T: Scalar>(expected: &Matrix<T>, w: &Matrix<T>, op: &'static str) -> Result<()> {
    if expected.shape() != w.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: w.shape(),
            right: expected.shape(),
        });
    }
    Ok(())
}

/// `scale · ‖W − D‖²`.
#[derive(Debug, Clone)]
pub struct MatrixRegression<T> {
    target: Matrix<T>,
    scale: T,
}

impl<T: Scalar> MatrixRegression<T> {
    pub fn new(target: Matrix<T>, scale: T) -> Result<Self> {
        if !(scale > T::zero()) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
        }
        Ok(Self { target, scale })
    }

    pub fn target(&self) -> &Matrix<T> {
        &self.target
    }

    pub fn scale(&self) -> T {
        self.scale
    }
}

impl<T: Scalar> Loss<T> for MatrixRegression<T> {
    fn value(&self, w: &Matrix<T>) -> Result<T> {
        check_shape(&self.target, w, "regression")?;
        Ok(self.scale * w.sub(&self.target)?.frobenius_sq())
    }

    fn gradient(&self, w: &Matrix<T>) -> Result<Matrix<T>> {
        check_shape(&self.target, w, "regression")?;
        Ok(w.sub(&self.target)?.scale(T::lit(2.0) * self.scale))
    }
}

/// Whitened linear regression through its sufficient statistics:
/// `½Tr(W Σ_XX Wᵀ) − Tr(W Σ_YXᵀ)`, i.e. `½‖Y − WX‖²` without the constant `½‖Y‖²`.
#[derive(Debug, Clone)]
pub struct WhitenedRegression<T> {
    sigma_yx: Matrix<T>,
    sigma_xx: Matrix<T>,
}

impl<T: Scalar> WhitenedRegression<T> {
    pub fn new(sigma_yx: Matrix<T>, sigma_xx: Matrix<T>) -> Result<Self> {
        if sigma_xx.rows() != sigma_xx.cols() || sigma_xx.cols() != sigma_yx.cols() {
            return Err(Error::ShapeMismatch {
                op: "whitened regression",
                left: sigma_yx.shape(),
                right: sigma_xx.shape(),
            });
        }
        if sigma_xx.asymmetry() > T::tol(1e-9) {
            return Err(Error::InvalidArgument("sigma_xx is not symmetric".into()));
        }
        Ok(Self { sigma_yx, sigma_xx })
    }
}

impl<T: Scalar> Loss<T> for WhitenedRegression<T> {
    fn value(&self, w: &Matrix<T>) -> Result<T> {
        check_shape(&self.sigma_yx, w, "whitened regression")?;
        let quad = w.matmul(&self.sigma_xx)?.hadamard(w)?.as_slice().iter().copied().sum::<T>();
        let lin = w.hadamard(&self.sigma_yx)?.as_slice().iter().copied().sum::<T>();
        Ok(T::lit(0.5) * quad - lin)
    }

    fn gradient(&self, w: &Matrix<T>) -> Result<Matrix<T>> {
        check_shape(&self.sigma_yx, w, "whitened regression")?;
        w.matmul(&self.sigma_xx)?.sub(&self.sigma_yx)
    }
}

/// `½‖M ⊙ (W − D)‖²` over the observed entries `M`.
#[derive(Debug, Clone)]
pub struct MaskedCompletion<T> {
    target: Matrix<T>,
    mask: Matrix<T>,
}

impl<T: Scalar> MaskedCompletion<T> {
    pub fn new(target: Matrix<T>, mask: Matrix<T>) -> Result<Self> {
        if target.shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "masked completion",
                left: target.shape(),
                right: mask.shape(),
            });
        }
        if mask.as_slice().iter().any(|&m| m != T::zero() && m != T::one()) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        Ok(Self { target, mask })
    }
}

impl<T: Scalar> Loss<T> for MaskedCompletion<T> {
    fn value(&self, w: &Matrix<T>) -> Result<T> {
        Ok(T::lit(0.5) * self.gradient(w)?.frobenius_sq())
    }

    fn gradient(&self, w: &Matrix<T>) -> Result<Matrix<T>> {
        check_shape(&self.target, w, "masked completion")?;
        w.sub(&self.target)?.hadamard(&self.mask)
    }
}

/// Squared distance from the flattened `w` to the hyperplane `{w : uᵀw = c}`.
#[derive(Debug, Clone)]
pub struct AffineDistance<T> {
    normal: Vec<T>,
    offset: T,
    norm_sq: T,
}

impl<T: Scalar> AffineDistance<T> {
    pub fn new(normal: Vec<T>, offset: T) -> Result<Self> {
        let norm_sq: T = normal.iter().map(|&x| x * x).sum();
        if !(norm_sq > T::zero()) {
            return Err(Error::InvalidArgument("hyperplane normal must be non-zero".into()));
        }
        Ok(Self {
            normal,
            offset,
            norm_sq,
        })
    }

    pub fn normal(&self) -> &[T] {
        &self.normal
    }

    pub fn offset(&self) -> T {
        self.offset
    }

    /// Point of the hyperplane closest to the origin in ℓ2.
    pub fn l2_closest_point(&self) -> Vec<T> {
        let t = self.offset / self.norm_sq;
        self.normal.iter().map(|&u| u * t).collect()
    }

    /// Point of the hyperplane closest to the origin in ℓ1: all mass on the
    /// coordinate with the largest `|uᵢ|`.
    pub fn l1_closest_point(&self) -> Vec<T> {
        let (k, uk) = self
            .normal
            .iter()
            .enumerate()
            .fold((0, T::zero()), |(bk, bu), (i, &u)| if u.abs() > bu.abs() { (i, u) } else { (bk, bu) });
        let mut p = vec![T::zero(); self.normal.len()];
        p[k] = self.offset / uk;
        p
    }

    fn residual(&self, w: &Matrix<T>) -> Result<T> {
        if w.as_slice().len() != self.normal.len() {
            return Err(Error::ShapeMismatch {
                op: "affine distance",
                left: w.shape(),
                right: (1, self.normal.len()),
            });
        }
        Ok(crate::matrix::dot(w.as_slice(), &self.normal) - self.offset)
    }
}

impl<T: Scalar> Loss<T> for AffineDistance<T> {
    fn value(&self, w: &Matrix<T>) -> Result<T> {
        let r = self.residual(w)?;
        Ok(r * r / (T::lit(2.0) * self.norm_sq))
    }

    fn gradient(&self, w: &Matrix<T>) -> Result<Matrix<T>> {
        let r = self.residual(w)? / self.norm_sq;
        let data = self.normal.iter().map(|&u| u * r).collect();
        Matrix::from_vec(w.rows(), w.cols(), data)
    }
}

impl<T: Scalar, L: Loss<T> + ?Sized> Loss<T> for Box<L> {
    fn value(&self, w: &Matrix<T>) -> Result<T> {
        (**self).value(w)
    }

    fn gradient(&self, w: &Matrix<T>) -> Result<Matrix<T>> {
        (**self).gradient(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorGradients<T> {
    pub grad_a: Matrix<T>,
    pub grad_b: Matrix<T>,
}

/// Gradients of `𝓛_L2` in `A` and `B`: `(∂L/∂W)B + λA` and `(∂L/∂W)ᵀA + λB`.
pub fn factor_gradients<T: Scalar, L: Loss<T> + ?Sized>(
    f: &Factorization<T>,
    loss: &L,
    lambda: T,
) -> Result<FactorGradients<T>> {
    let g = loss.gradient(&f.product())?;
    let mut grad_a = g.matmul(f.b())?;
    grad_a.axpy(lambda, f.a())?;
    let mut grad_b = g.t_matmul(f.a())?;
    grad_b.axpy(lambda, f.b())?;
    Ok(FactorGradients { grad_a, grad_b })
}

/// Gradients of `L(A₁⋯A_L) + (λ/2)Σ‖A_l‖²` in every layer.
pub fn chain_gradients<T: Scalar, L: Loss<T> + ?Sized>(
    c: &DeepChain<T>,
    loss: &L,
    lambda: T,
) -> Result<Vec<Matrix<T>>> {
    let layers = c.layers();
    let depth = layers.len();
    let g = loss.gradient(&c.product())?;
    let mut out = Vec::with_capacity(depth);
    for l in 0..depth {
        // (A₁⋯A_{l−1})ᵀ · G · (A_{l+1}⋯A_L)ᵀ
        let left = if l == 0 {
            g.clone()
        } else {
            prefix_product(&layers[..l]).t_matmul(&g)?
        };
        let mut grad = if l + 1 == depth {
            left
        } else {
            left.matmul_t(&prefix_product(&layers[l + 1..]))?
        };
        grad.axpy(lambda, &layers[l])?;
        out.push(grad);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizedPair<T> {
    /// `𝓛_L2`
    pub l2_value: T,
    /// `𝓛_*`
    pub nuclear_value: T,
    /// `𝓛_L2 − 𝓛_*`
    pub gap: T,
}

pub fn evaluate_both_losses<T: Scalar, L: Loss<T> + ?Sized>(
    f: &Factorization<T>,
    loss: &L,
    lambda: T,
) -> Result<RegularizedPair<T>> {
    let w = f.product();
    let base = loss.value(&w)?;
    let l2_value = base + lambda * f.half_frobenius_sum();
    let nuclear_value = base + lambda * nuclear_norm(&w)?;
    Ok(RegularizedPair {
        l2_value,
        nuclear_value,
        gap: l2_value - nuclear_value,
    })
}

/// Chain analogue: the Schatten counterpart is `L + (λL/2)‖∏A_l‖_{2/L}^{2/L}`,
/// which reduces to `𝓛_*` at depth 2.
pub fn evaluate_chain_losses<T: Scalar, L: Loss<T> + ?Sized>(
    c: &DeepChain<T>,
    loss: &L,
    lambda: T,
) -> Result<RegularizedPair<T>> {
    let base = loss.value(&c.product())?;
    let depth = T::lit(c.depth() as f64);
    let half = T::lit(0.5);
    let l2_value = base + half * lambda * depth * c.mean_frobenius_sq();
    let nuclear_value = base + half * lambda * depth * c.product_schatten()?;
    Ok(RegularizedPair {
        l2_value,
        nuclear_value,
        gap: l2_value - nuclear_value,
    })
}
