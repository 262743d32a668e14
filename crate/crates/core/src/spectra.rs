//! SVD, Schatten norms and the pseudo-rank metric.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration. It is slower than a
//! bidiagonal QR sweep but every singular value comes out with high relative
//! accuracy, which matters when the small end of the spectrum is the object
//! of study.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 80;

/// Singular values below `CLAMP_REL · max(s₁, 1)` are reported as exactly zero.
pub const CLAMP_REL: f64 = 1e-12;

pub const DEFAULT_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone)]
pub struct SvdResult<T> {
    /// m×k, orthonormal columns.
    pub u: Matrix<T>,
    /// Non-increasing, length k = min(m, n).
    pub s: Vec<T>,
    /// n×k, orthonormal columns.
    pub v: Matrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn reconstruct(&self) -> Matrix<T> {
        let us = Matrix::from_fn(self.u.rows(), self.s.len(), |i, j| self.u[(i, j)] * self.s[j]);
        us.matmul_t(&self.v).expect("svd factors are conformable")
    }

    /// Number of singular values that survived the clamp.
    pub fn rank(&self) -> usize {
        self.s.iter().filter(|&&x| x > T::zero()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumReport<T> {
    pub singular_values: Vec<T>,
    pub nuclear: T,
    pub frobenius: T,
    pub pseudo_rank: T,
    pub threshold: T,
}

fn clamp_level<T: Scalar>(s1: T) -> T {
    T::lit(CLAMP_REL) * s1.max(T::one())
}

/// Thin SVD of `m`.
pub fn svd<T: Scalar>(m: &Matrix<T>) -> Result<SvdResult<T>> {
    if m.is_empty() {
        return Err(Error::InvalidArgument("svd of an empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite);
    }
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let r = jacobi_tall(&m.transpose())?;
        Ok(SvdResult {
            u: r.v,
            s: r.s,
            v: r.u,
        })
    }
}

/// One-sided Jacobi on a matrix with rows ≥ cols.
fn jacobi_tall<T: Scalar>(m: &Matrix<T>) -> Result<SvdResult<T>> {
    let (p, q) = m.shape();
    // Columns of `m` stored as rows of `g` so each rotation touches contiguous memory.
    let mut g = m.transpose();
    let mut vt = Matrix::<T>::identity(q);
    let tol = T::epsilon() * T::lit(p as f64).sqrt();

    let mut converged = q < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..q.saturating_sub(1) {
            for j in (i + 1)..q {
                let (alpha, beta, gamma) = {
                    let gi = g.row(i);
                    let gj = g.row(j);
                    (dot(gi, gi), dot(gj, gj), dot(gi, gj))
                };
                if gamma == T::zero() {
                    continue;
                }
                let scale = (alpha * beta).sqrt();
                if scale == T::zero() || gamma.abs() <= tol * scale {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut g, i, j, c, s);
                rotate_rows(&mut vt, i, j, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::SvdNoConvergence);
    }

    let norms: Vec<T> = (0..q).map(|j| dot(g.row(j), g.row(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).expect("finite norms"));

    let s1 = norms[order[0]];
    let floor = clamp_level(s1);
    let mut s = Vec::with_capacity(q);
    let mut u_cols: Vec<Option<Vec<T>>> = Vec::with_capacity(q);
    let mut v = Matrix::zeros(q, q);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > floor {
            s.push(sigma);
            u_cols.push(Some(g.row(j).iter().map(|&x| x / sigma).collect()));
        } else {
            s.push(T::zero());
            u_cols.push(None);
        }
        for r in 0..q {
            v[(r, k)] = vt[(j, r)];
        }
    }

    let u_cols = complete_orthonormal(p, u_cols);
    let u = Matrix::from_fn(p, q, |i, k| u_cols[k][i]);
    Ok(SvdResult { u, s, v })
}

fn rotate_rows<T: Scalar>(m: &mut Matrix<T>, i: usize, j: usize, c: T, s: T) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    let (lo, hi) = data.split_at_mut(j * cols);
    let ri = &mut lo[i * cols..(i + 1) * cols];
    let rj = &mut hi[..cols];
    for (a, b) in ri.iter_mut().zip(rj.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills the `None` slots with unit vectors orthogonal to every other column.
fn complete_orthonormal<T: Scalar>(dim: usize, cols: Vec<Option<Vec<T>>>) -> Vec<Vec<T>> {
    let mut basis: Vec<Vec<T>> = cols.iter().flatten().cloned().collect();
    let mut candidate = 0usize;
    let mut out = Vec::with_capacity(cols.len());
    for c in cols {
        match c {
            Some(v) => out.push(v),
            None => loop {
                assert!(candidate < dim, "ran out of completion candidates");
                let mut e = vec![T::zero(); dim];
                e[candidate] = T::one();
                candidate += 1;
                // Two passes of Gram–Schmidt keep the completion orthogonal to working precision.
                for _ in 0..2 {
                    for b in &basis {
                        let proj = dot(&e, b);
                        for (x, &y) in e.iter_mut().zip(b) {
                            *x -= proj * y;
                        }
                    }
                }
                let n = dot(&e, &e).sqrt();
                if n > T::lit(1e-3) {
                    e.iter_mut().for_each(|x| *x /= n);
                    basis.push(e.clone());
                    out.push(e);
                    break;
                }
            },
        }
    }
    out
}

pub fn singular_values<T: Scalar>(m: &Matrix<T>) -> Result<Vec<T>> {
    Ok(svd(m)?.s)
}

/// `Σ sᵢᵖ` over the singular values of `m`; `p = 1` is the nuclear norm.
pub fn schatten_power<T: Scalar>(m: &Matrix<T>, p: T) -> Result<T> {
    if !(p > T::zero()) {
        return Err(Error::InvalidArgument(format!("schatten exponent must be positive, got {p}")));
    }
    let s = singular_values(m)?;
    Ok(s.iter().filter(|&&x| x > T::zero()).map(|&x| x.powf(p)).sum())
}

pub fn nuclear_norm<T: Scalar>(m: &Matrix<T>) -> Result<T> {
    Ok(singular_values(m)?.into_iter().sum())
}

/// Fraction `k/n` of leading singular values needed to reach `threshold` of the
/// total singular-value mass. The all-zero spectrum has pseudo-rank 0.
pub fn pseudo_rank<T: Scalar>(s: &[T], threshold: T) -> Result<T> {
    if !(threshold > T::zero() && threshold <= T::one()) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1]")));
    }
    if s.is_empty() {
        return Err(Error::InvalidSpectrum);
    }
    if s.iter().any(|x| !x.is_finite() || *x < T::zero()) || s.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidSpectrum);
    }
    let total: T = s.iter().copied().sum();
    if total == T::zero() {
        return Ok(T::zero());
    }
    let n = s.len();
    let target = threshold * total;
    let mut cum = T::zero();
    let mut k = n;
    for (i, &x) in s.iter().enumerate() {
        cum += x;
        if cum >= target {
            k = i + 1;
            break;
        }
    }
    Ok(T::lit(k as f64) / T::lit(n as f64))
}

/// Builds a report from an already-computed spectrum.
pub fn report_from_values<T: Scalar>(s: Vec<T>, threshold: T) -> Result<SpectrumReport<T>> {
    let pseudo_rank = pseudo_rank(&s, threshold)?;
    Ok(SpectrumReport {
        nuclear: s.iter().copied().sum(),
        frobenius: s.iter().map(|&x| x * x).sum::<T>().sqrt(),
        pseudo_rank,
        threshold,
        singular_values: s,
    })
}

pub fn spectrum_report<T: Scalar>(m: &Matrix<T>, threshold: T) -> Result<SpectrumReport<T>> {
    report_from_values(singular_values(m)?, threshold)
}

/// Singular values of `x·yᵀ` (length `min(x.rows, y.rows)`) without forming
/// the product: with thin QR factors `x = Qₓ Rₓ`, `y = Q_y R_y`, the nonzero
/// singular values of `x·yᵀ` are those of `Rₓ R_yᵀ`.
pub fn product_singular_values<T: Scalar>(x: &Matrix<T>, y: &Matrix<T>) -> Result<Vec<T>> {
    if x.cols() != y.cols() {
        return Err(Error::ShapeMismatch {
            op: "product_singular_values",
            left: x.shape(),
            right: y.shape(),
        });
    }
    let full = x.rows().min(y.rows());
    let r = x.cols();
    if x.rows() < r || y.rows() < r {
        return singular_values(&x.matmul_t(y)?);
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite);
    }
    let rx = householder_r(x);
    let ry = householder_r(y);
    let mut s = singular_values(&rx.matmul_t(&ry)?)?;
    s.resize(full, T::zero());
    Ok(s)
}

/// Upper-triangular `R` (cols×cols) of a Householder QR of a tall matrix.
fn householder_r<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let (rows, cols) = m.shape();
    // work on the transpose so each column is a contiguous row
    let mut a = m.transpose();
    for k in 0..cols {
        let norm = a.row(k)[k..].iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm == T::zero() {
            continue;
        }
        let alpha = if a[(k, k)] > T::zero() { -norm } else { norm };
        let mut v: Vec<T> = a.row(k)[k..].to_vec();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 == T::zero() {
            continue;
        }
        for j in k..cols {
            let proj = {
                let col = &a.row(j)[k..];
                T::lit(2.0) * dot(col, &v) / vnorm2
            };
            let data = a.as_mut_slice();
            for (i, &vi) in v.iter().enumerate() {
                data[j * rows + k + i] -= proj * vi;
            }
        }
    }
    Matrix::from_fn(cols, cols, |i, j| if j >= i { a[(j, i)] } else { T::zero() })
}
