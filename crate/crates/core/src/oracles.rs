//! Closed-form reference solutions and estimators used to check the dynamics
//! independently of the optimizers.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::spectra::svd;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumSpectrum<T> {
    pub input_singular_values: Vec<T>,
    pub lambda: T,
    pub output_singular_values: Vec<T>,
}

/// Stable equilibrium spectrum of a whitened two-layer linear model with
/// penalty `(λ/2)(‖A‖² + ‖B‖²)`: every singular value shrinks to `(sᵢ − λ)₊`.
///
/// Requires distinct positive `sᵢ` and `λ > 0`.
pub fn two_layer_equilibrium<T: Scalar>(s: &[T], lambda: T) -> Result<EquilibriumSpectrum<T>> {
    if !(lambda > T::zero()) {
        return Err(Error::AssumptionViolated(format!("lambda must be positive, got {lambda}")));
    }
    if let Some(x) = s.iter().find(|&&x| !(x > T::zero())) {
        return Err(Error::AssumptionViolated(format!("singular value {x} is not positive")));
    }
    let mut sorted = s.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::AssumptionViolated("singular values are not distinct".into()));
    }
    Ok(EquilibriumSpectrum {
        input_singular_values: s.to_vec(),
        lambda,
        output_singular_values: s.iter().map(|&x| (x - lambda).max(T::zero())).collect(),
    })
}

/// Equilibrium of the unfactorized model under the same penalty: `sᵢ/(1 + λ)`.
/// The rank never changes.
pub fn single_matrix_equilibrium<T: Scalar>(s: &[T], lambda: T) -> Vec<T> {
    s.iter().map(|&x| x / (T::one() + lambda)).collect()
}

/// Global minimizer of `scale·‖W − D‖² + λ‖W‖_*`: soft-threshold the singular
/// values of `D` at `λ / (2·scale)`.
pub fn svt_minimizer<T: Scalar>(d: &Matrix<T>, lambda: T, scale: T) -> Result<Matrix<T>> {
    if !(lambda >= T::zero()) || !(scale > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "need lambda >= 0 and scale > 0, got {lambda} and {scale}"
        )));
    }
    let tau = lambda / (T::lit(2.0) * scale);
    let mut dec = svd(d)?;
    for s in &mut dec.s {
        *s = (*s - tau).max(T::zero());
    }
    Ok(dec.reconstruct())
}

/// L2 strength, in the `(λ/2)‖W‖²` convention, whose small-weight equilibria
/// match AdamW with decoupled decay `λ_wd` and denominator offset `ε`.
///
/// Under the `λ‖W‖²` convention the same strength reads `ε·λ_wd/2`.
pub fn adamw_l2_equivalent<T: Scalar>(lambda_wd: T, epsilon: T) -> T {
    epsilon * lambda_wd
}

/// Least-squares slope of `−log(series[k])` against `k` over `window`.
pub fn fit_exponential_rate<T: Scalar>(series: &[T], window: std::ops::Range<usize>) -> Result<T> {
    if window.end > series.len() {
        return Err(Error::InvalidArgument(format!(
            "window {window:?} exceeds series length {}",
            series.len()
        )));
    }
    let points: Vec<(T, T)> = window
        .clone()
        .map(|k| (T::lit(k as f64), series[k]))
        .collect();
    fit_exponential_rate_xy(&points)
}

/// Same as [`fit_exponential_rate`] for irregularly spaced `(x, y)` samples.
pub fn fit_exponential_rate_xy<T: Scalar>(points: &[(T, T)]) -> Result<T> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(_, y)| !(y > T::zero()) || !y.is_finite()) {
        return Err(Error::CannotFitLog);
    }
    let n = T::lit(points.len() as f64);
    let mx = points.iter().map(|p| p.0).sum::<T>() / n;
    let my = points.iter().map(|p| -p.1.ln()).sum::<T>() / n;
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    for &(x, y) in points {
        let dx = x - mx;
        sxy += dx * (-y.ln() - my);
        sxx += dx * dx;
    }
    if sxx == T::zero() {
        return Err(Error::InvalidArgument("all x values coincide".into()));
    }
    Ok(sxy / sxx)
}
