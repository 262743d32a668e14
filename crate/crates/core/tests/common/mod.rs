#![allow(dead_code)]

use frl_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix<f64> {
    let n = Normal::new(0.0, std).unwrap();
    Matrix::from_fn(rows, cols, |_, _| n.sample(rng))
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, half_width: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-half_width..half_width))
}

/// Random matrix with orthonormal columns (n×k, k ≤ n) via Gram-Schmidt.
pub fn orthonormal(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Matrix<f64> {
    let g = gaussian(rng, n, k, 1.0);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..k {
        let mut c = g.col(j);
        for _ in 0..2 {
            for q in &cols {
                let d: f64 = c.iter().zip(q).map(|(a, b)| a * b).sum();
                c.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        c.iter_mut().for_each(|x| *x /= norm);
        cols.push(c);
    }
    Matrix::from_fn(n, k, |i, j| cols[j][i])
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&Matrix<f64>) -> f64, x: &Matrix<f64>) -> Matrix<f64> {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let h = 1e-6 * x[(i, j)].abs().max(1.0);
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + h;
            let up = f(&probe);
            probe[(i, j)] = orig - h;
            let down = f(&probe);
            probe[(i, j)] = orig;
            g[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let scale = a.frobenius().max(b.frobenius());
    if scale == 0.0 {
        return 0.0;
    }
    a.sub(b).unwrap().frobenius() / scale
}
