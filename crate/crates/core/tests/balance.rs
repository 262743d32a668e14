mod common;

use common::{gaussian, orthonormal, rel_err, rng};
use frl_core::factorized::{balanced_factors_from, DeepChain, Factorization};
use frl_core::spectra::nuclear_norm;
use frl_core::{Error, Matrix};
use rand::Rng;

fn low_rank(rng: &mut rand_chacha::ChaCha8Rng, m: usize, n: usize, r: usize) -> Matrix<f64> {
    gaussian(rng, m, r, 1.0).matmul_t(&gaussian(rng, n, r, 1.0)).unwrap()
}

fn naive_product(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            for k in 0..a.cols() {
                out[(i, j)] += a[(i, k)] * b[(j, k)];
            }
        }
    }
    out
}

#[test]
fn product_matches_triple_loop() {
    let mut rng = rng(1);
    let a = gaussian(&mut rng, 4, 2, 1.0);
    let b = gaussian(&mut rng, 3, 2, 1.0);
    let f = Factorization::new(a.clone(), b.clone()).unwrap();
    assert!(f.product().sub(&naive_product(&a, &b)).unwrap().max_abs() < 1e-12);
}

#[test]
fn mismatched_inner_dims_rejected() {
    let r = Factorization::new(Matrix::<f64>::zeros(3, 2), Matrix::zeros(3, 3));
    assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
}

#[test]
fn balanced_construction_examples() {
    let f = balanced_factors_from(&Matrix::from_diag(&[4.0, 1.0]), 2, None).unwrap();
    assert!(f.a().sub(&Matrix::from_diag(&[2.0, 1.0])).unwrap().max_abs() < 1e-12);
    assert!(f.b().sub(&Matrix::from_diag(&[2.0, 1.0])).unwrap().max_abs() < 1e-12);

    let z = balanced_factors_from(&Matrix::<f64>::zeros(3, 3), 2, None).unwrap();
    assert_eq!(z.a().shape(), (3, 2));
    assert_eq!(z.a().max_abs(), 0.0);
    assert_eq!(z.b().max_abs(), 0.0);
}

#[test]
fn balanced_construction_rejects_excess_rank() {
    let mut rng = rng(2);
    let w = low_rank(&mut rng, 5, 4, 3);
    assert!(matches!(balanced_factors_from(&w, 2, None), Err(Error::RankExceedsBottleneck)));
    assert!(balanced_factors_from(&w, 5, None).is_err());
    let not_orthogonal = Matrix::from_diag(&[1.0, 2.0, 1.0]);
    assert!(balanced_factors_from(&w, 3, Some(&not_orthogonal)).is_err());
}

#[test]
fn balanced_construction_round_trips_200_low_rank_matrices() {
    let mut rng = rng(3);
    for _ in 0..200 {
        let m = rng.random_range(2..=7);
        let n = rng.random_range(2..=7);
        let r = rng.random_range(1..=m.min(n));
        let w = low_rank(&mut rng, m, n, r);
        let f = balanced_factors_from(&w, r, None).unwrap();
        let wf = w.frobenius();
        assert!(f.product().sub(&w).unwrap().frobenius() <= 1e-8 * (1.0 + wf));
        assert!(f.balance_gap().frobenius() < 1e-9 * (1.0 + wf));
        let nuc = nuclear_norm(&w).unwrap();
        assert!((f.half_frobenius_sum() - nuc).abs() <= 1e-9 * nuc.max(1.0));
        assert!(f.regularizer_gap_with_bound().unwrap().gap < 1e-9 * nuc.max(1.0));
    }
}

#[test]
fn rotation_changes_factors_not_invariants() {
    let mut rng = rng(4);
    let w = low_rank(&mut rng, 6, 5, 3);
    let plain = balanced_factors_from(&w, 3, None).unwrap();
    let o = orthonormal(&mut rng, 3, 3);
    let rotated = balanced_factors_from(&w, 3, Some(&o)).unwrap();
    assert!(rel_err(plain.a(), rotated.a()) > 1e-3);
    assert!(rotated.product().sub(&plain.product()).unwrap().max_abs() < 1e-9);
    assert!(rotated.balance_gap().frobenius() < 1e-9);
    assert!((rotated.half_frobenius_sum() - plain.half_frobenius_sum()).abs() < 1e-9);
}

#[test]
fn balance_gap_examples() {
    let mut rng = rng(5);
    let a = gaussian(&mut rng, 4, 3, 1.0);
    let same = Factorization::new(a.clone(), a).unwrap();
    assert_eq!(same.balance_gap().max_abs(), 0.0);

    let f = Factorization::new(Matrix::from_rows(&[[2.0]]).unwrap(), Matrix::from_rows(&[[1.0]]).unwrap()).unwrap();
    assert_eq!(f.balance_gap()[(0, 0)], 3.0);
}

#[test]
fn gap_bound_worked_example() {
    let f = Factorization::new(Matrix::<f64>::identity(2), Matrix::identity(2).scale(2.0)).unwrap();
    let g = f.regularizer_gap_with_bound().unwrap();
    assert!((g.gap - 1.0).abs() < 1e-12);
    assert!((g.bound - 6.0f64.sqrt() * 3.0).abs() < 1e-12);
}

#[test]
fn gap_never_exceeds_bound_and_nuclear_below_half_frobenius() {
    let mut rng = rng(6);
    for _ in 0..1000 {
        let m = rng.random_range(1..=10);
        let n = rng.random_range(1..=10);
        let r = rng.random_range(1..=10);
        let std = rng.random_range(0.1..3.0);
        let a = gaussian(&mut rng, m, r, std);
        let b = gaussian(&mut rng, n, r, 1.0);
        let f = Factorization::new(a, b).unwrap();
        let g = f.regularizer_gap_with_bound().unwrap();
        assert!(g.gap.is_finite() && g.bound.is_finite());
        assert!(g.gap <= g.bound * (1.0 + 1e-12) + 1e-12, "{g:?}");
        assert!(g.gap_a <= g.bound_a * (1.0 + 1e-12) + 1e-12, "{g:?}");
        let nuc = nuclear_norm(&f.product()).unwrap();
        assert!(nuc <= f.half_frobenius_sum() * (1.0 + 1e-12) + 1e-12);
    }
}

#[test]
fn gap_shrinks_with_perturbation() {
    let mut rng = rng(7);
    let w = low_rank(&mut rng, 6, 5, 3);
    let base = balanced_factors_from(&w, 3, None).unwrap();
    let na = gaussian(&mut rng, 6, 3, 1.0);
    let nb = gaussian(&mut rng, 5, 3, 1.0);
    let gaps: Vec<f64> = [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&d| {
            let f = Factorization::new(
                base.a().add(&na.scale(d)).unwrap(),
                base.b().add(&nb.scale(d)).unwrap(),
            )
            .unwrap();
            f.regularizer_gap_with_bound().unwrap().gap
        })
        .collect();
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
}

#[test]
fn bottleneck_predicate() {
    let f = Factorization::new(Matrix::<f64>::zeros(3, 2), Matrix::zeros(4, 2)).unwrap();
    assert!(f.has_bottleneck());
    let over = Factorization::new(Matrix::<f64>::zeros(3, 5), Matrix::zeros(4, 5)).unwrap();
    assert!(!over.has_bottleneck());
}

/// Depth-3 chain `U Σ^{1/3} O₁ᵀ · O₁ Σ^{1/3} O₂ᵀ · O₂ Σ^{1/3} Vᵀ`, exactly balanced.
fn balanced_chain(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<Matrix<f64>> {
    let s: Vec<f64> = (0..n).map(|i| (3.0 - i as f64 * 0.5f64).powf(1.0 / 3.0)).collect();
    let root = Matrix::from_diag(&s);
    let u = orthonormal(rng, n, n);
    let v = orthonormal(rng, n, n);
    let o1 = orthonormal(rng, n, n);
    let o2 = orthonormal(rng, n, n);
    vec![
        u.matmul(&root).unwrap().matmul_t(&o1).unwrap(),
        o1.matmul(&root).unwrap().matmul_t(&o2).unwrap(),
        o2.matmul(&root).unwrap().matmul_t(&v).unwrap(),
    ]
}

#[test]
fn diagonal_chain_is_balanced() {
    let d = Matrix::from_diag(&[1.5, 0.7, 0.2]);
    let c = DeepChain::new(vec![d.clone(), d.clone(), d]).unwrap();
    let b = c.balance_and_bound().unwrap();
    assert_eq!(b.epsilon, 0.0);
    assert!(b.per_factor_gaps.iter().all(|&g| g < 1e-12), "{:?}", b.per_factor_gaps);
    assert_eq!(b.bound_ok, Some(true));
}

#[test]
fn depth_two_chain_matches_pair_gap() {
    let mut rng = rng(8);
    let a1 = gaussian(&mut rng, 4, 3, 1.0);
    let a2 = gaussian(&mut rng, 3, 5, 1.0);
    let chain = DeepChain::new(vec![a1.clone(), a2.clone()]).unwrap();
    let pair = Factorization::new(a1.clone(), a2.transpose()).unwrap();
    let cb = chain.balance_and_bound().unwrap();
    let pg = pair.regularizer_gap_with_bound().unwrap();
    assert!((cb.per_factor_gaps[0] - pg.gap_a).abs() < 1e-10);
    let q_nuc = nuclear_norm(&pair.balance_gap()).unwrap();
    assert!((cb.epsilon - q_nuc).abs() < 1e-10);
}

#[test]
fn near_balanced_chain_respects_bound() {
    let mut rng = rng(9);
    for trial in 0..20 {
        let mut layers = balanced_chain(&mut rng, 4);
        for l in &mut layers {
            let noise = gaussian(&mut rng, 4, 4, 1e-3);
            *l = l.add(&noise).unwrap();
        }
        let c = DeepChain::new(layers).unwrap();
        let b = c.balance_and_bound().unwrap();
        assert!(b.epsilon > 0.0 && b.epsilon < 0.1, "trial {trial}: {}", b.epsilon);
        assert!(b.side_condition);
        assert_eq!(b.bound_ok, Some(true), "trial {trial}: {b:?}");
    }
}

#[test]
fn far_from_balanced_chain_reports_not_applicable() {
    let tiny = Matrix::from_diag(&[1e-2, 1e-2]);
    let big = Matrix::from_diag(&[10.0, 10.0]);
    let c = DeepChain::new(vec![tiny, big.clone(), big]).unwrap();
    let b = c.balance_and_bound().unwrap();
    assert!(!b.side_condition);
    assert_eq!(b.bound_ok, None);
}

#[test]
fn chain_invariants_enforced() {
    assert!(DeepChain::new(vec![Matrix::<f64>::identity(2)]).is_err());
    assert!(DeepChain::new(vec![Matrix::<f64>::zeros(2, 3), Matrix::zeros(2, 3)]).is_err());
}
