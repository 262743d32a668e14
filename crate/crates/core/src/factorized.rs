//! Factor pairs `W = A·Bᵀ`, deep linear chains `W = A₁⋯A_L`, and the
//! diagnostics that relate their Frobenius norms to Schatten norms of the
//! product.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::spectra::{nuclear_norm, schatten_power, svd};

#[derive(Debug, Clone, PartialEq)]
pub struct Factorization<T> {
    a: Matrix<T>,
    b: Matrix<T>,
}

/// Gap between `‖ABᵀ‖_*` and the factor norms, with the bound that controls it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapBound<T> {
    /// `|‖ABᵀ‖_* − ½(‖A‖² + ‖B‖²)|`
    pub gap: T,
    /// `√‖AᵀA − BᵀB‖_* · (‖A‖_* + ‖B‖_*) / 2`
    pub bound: T,
    /// `|‖ABᵀ‖_* − ‖A‖²|`
    pub gap_a: T,
    /// `√‖AᵀA − BᵀB‖_* · ‖A‖_*`
    pub bound_a: T,
}

impl<T: Scalar> Factorization<T> {
    pub fn new(a: Matrix<T>, b: Matrix<T>) -> Result<Self> {
        if a.cols() != b.cols() {
            return Err(Error::ShapeMismatch {
                op: "factorization",
                left: a.shape(),
                right: b.shape(),
            });
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix<T> {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix<T> {
        &mut self.b
    }

    pub fn parts_mut(&mut self) -> (&mut Matrix<T>, &mut Matrix<T>) {
        (&mut self.a, &mut self.b)
    }

    pub fn into_parts(self) -> (Matrix<T>, Matrix<T>) {
        (self.a, self.b)
    }

    /// Shared inner dimension `r`.
    pub fn inner_dim(&self) -> usize {
        self.a.cols()
    }

    /// `r ≤ m` and `r ≤ n`.
    pub fn has_bottleneck(&self) -> bool {
        let r = self.inner_dim();
        r <= self.a.rows() && r <= self.b.rows()
    }

    pub fn product(&self) -> Matrix<T> {
        self.a.matmul_t(&self.b).expect("factor columns agree by construction")
    }

    /// `Q = AᵀA − BᵀB`.
    pub fn balance_gap(&self) -> Matrix<T> {
        let ata = self.a.t_matmul(&self.a).expect("square");
        let btb = self.b.t_matmul(&self.b).expect("square");
        ata.sub(&btb).expect("both r×r")
    }

    /// `½(‖A‖² + ‖B‖²)`.
    pub fn half_frobenius_sum(&self) -> T {
        T::lit(0.5) * (self.a.frobenius_sq() + self.b.frobenius_sq())
    }

    pub fn regularizer_gap_with_bound(&self) -> Result<GapBound<T>> {
        let nuc = nuclear_norm(&self.product())?;
        // Q is symmetric, so its singular values are the absolute eigenvalues.
        let q_nuc = nuclear_norm(&self.balance_gap())?;
        let nuc_a = nuclear_norm(&self.a)?;
        let nuc_b = nuclear_norm(&self.b)?;
        let root = q_nuc.sqrt();
        Ok(GapBound {
            gap: (nuc - self.half_frobenius_sum()).abs(),
            bound: root * (nuc_a + nuc_b) * T::lit(0.5),
            gap_a: (nuc - self.a.frobenius_sq()).abs(),
            bound_a: root * nuc_a,
        })
    }
}

/// Balanced factors `A = U(√S;0)Oᵀ`, `B = V(√S;0)Oᵀ` of `w` with inner dimension `r`.
///
/// `rotation` is the orthogonal `O` (identity when omitted).
pub fn balanced_factors_from<T: Scalar>(
    w: &Matrix<T>,
    r: usize,
    rotation: Option<&Matrix<T>>,
) -> Result<Factorization<T>> {
    let (m, n) = w.shape();
    if r == 0 || r > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "bottleneck r = {r} must lie in 1..={}",
            m.min(n)
        )));
    }
    if let Some(o) = rotation {
        if o.shape() != (r, r) {
            return Err(Error::ShapeMismatch {
                op: "balanced_factors_from rotation",
                left: o.shape(),
                right: (r, r),
            });
        }
        let err = o.t_matmul(o)?.sub(&Matrix::identity(r))?.frobenius();
        if err > T::tol(1e-9) {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthogonal (‖OᵀO − I‖ = {err})"
            )));
        }
    }
    let dec = svd(w)?;
    if dec.rank() > r {
        return Err(Error::RankExceedsBottleneck);
    }
    let root: Vec<T> = dec.s[..r].iter().map(|x| x.sqrt()).collect();
    let mut a = Matrix::from_fn(m, r, |i, j| dec.u[(i, j)] * root[j]);
    let mut b = Matrix::from_fn(n, r, |i, j| dec.v[(i, j)] * root[j]);
    if let Some(o) = rotation {
        a = a.matmul_t(o)?;
        b = b.matmul_t(o)?;
    }
    Factorization::new(a, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepChain<T> {
    layers: Vec<Matrix<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainBalance<T> {
    /// `max_l ‖A_lᵀA_l − A_{l+1}A_{l+1}ᵀ‖_*`
    pub epsilon: T,
    /// `|‖∏A_l‖_{2/L}^{2/L} − ‖A_k‖²|` for each k.
    pub per_factor_gaps: Vec<T>,
    /// `r‖A_k‖_*^{L−1} e^{2/L} L^{4/L} ε^{1/L}` for each k.
    pub bounds: Vec<T>,
    /// Whether `ε ≤ min_l ‖A_l‖_*^L / L⁴` holds.
    pub side_condition: bool,
    /// `Some(all gaps ≤ bounds)` when the side condition holds, `None` otherwise.
    pub bound_ok: Option<bool>,
}

impl<T: Scalar> DeepChain<T> {
    pub fn new(layers: Vec<Matrix<T>>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a chain needs at least 2 layers, got {}",
                layers.len()
            )));
        }
        for w in layers.windows(2) {
            if w[0].cols() != w[1].rows() {
                return Err(Error::ShapeMismatch {
                    op: "deep chain",
                    left: w[0].shape(),
                    right: w[1].shape(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Matrix<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn product(&self) -> Matrix<T> {
        prefix_product(&self.layers)
    }

    /// Smallest dimension appearing anywhere in the chain.
    pub fn bottleneck(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| [l.rows(), l.cols()])
            .min()
            .expect("non-empty chain")
    }

    /// `A_lᵀA_l − A_{l+1}A_{l+1}ᵀ` for each consecutive pair.
    pub fn balance_gaps(&self) -> Vec<Matrix<T>> {
        self.layers
            .windows(2)
            .map(|w| {
                let left = w[0].t_matmul(&w[0]).expect("square");
                let right = w[1].matmul_t(&w[1]).expect("square");
                left.sub(&right).expect("conformable chain")
            })
            .collect()
    }

    pub fn balance_epsilon(&self) -> Result<T> {
        self.balance_gaps()
            .iter()
            .map(nuclear_norm)
            .try_fold(T::zero(), |m, x| x.map(|x| m.max(x)))
    }

    /// `(1/L) Σ ‖A_l‖²`.
    pub fn mean_frobenius_sq(&self) -> T {
        self.layers.iter().map(|l| l.frobenius_sq()).sum::<T>() / T::lit(self.depth() as f64)
    }

    /// `‖∏A_l‖_{2/L}^{2/L}`.
    pub fn product_schatten(&self) -> Result<T> {
        schatten_power(&self.product(), T::lit(2.0 / self.depth() as f64))
    }

    pub fn balance_and_bound(&self) -> Result<ChainBalance<T>> {
        let depth = self.depth();
        let l = T::lit(depth as f64);
        let epsilon = self.balance_epsilon()?;
        let schatten = self.product_schatten()?;
        let nuclear: Vec<T> = self.layers.iter().map(nuclear_norm).collect::<Result<_>>()?;

        let min_pow = nuclear
            .iter()
            .map(|n| n.powi(depth as i32))
            .fold(T::infinity(), T::min);
        let side_condition = epsilon <= min_pow / l.powi(4);

        let r = T::lit(self.bottleneck() as f64);
        let constant = r
            * (T::lit(2.0) / l).exp()
            * l.powf(T::lit(4.0) / l)
            * epsilon.powf(T::one() / l);
        let per_factor_gaps: Vec<T> = self
            .layers
            .iter()
            .map(|a| (schatten - a.frobenius_sq()).abs())
            .collect();
        let bounds: Vec<T> = nuclear
            .iter()
            .map(|n| constant * n.powi(depth as i32 - 1))
            .collect();
        let bound_ok = side_condition.then(|| {
            per_factor_gaps
                .iter()
                .zip(&bounds)
                .all(|(g, b)| g <= b)
        });
        Ok(ChainBalance {
            epsilon,
            per_factor_gaps,
            bounds,
            side_condition,
            bound_ok,
        })
    }
}

pub(crate) fn prefix_product<T: Scalar>(layers: &[Matrix<T>]) -> Matrix<T> {
    let mut it = layers.iter();
    let first = it.next().expect("at least one layer").clone();
    it.fold(first, |acc, l| acc.matmul(l).expect("conformable chain"))
}
