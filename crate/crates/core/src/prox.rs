//! Closed-form proximal maps for the row-structured regularizers.
//!
//! Each map solves `argmin_F λ·g(F) + (ρ/2)‖F − T₂‖²_F` where the rows of
//! `T₂` are filters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::tensor::{row_l2_norms, Matrix, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    /// Sum of row norms: shrinks every row towards zero.
    L21,
    /// Number of nonzero rows: keeps or kills each row.
    L20,
    /// Elementwise absolute sum (unstructured).
    L1,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 3] = [Self::L21, Self::L20, Self::L1];

    /// `g(F)` for this regularizer.
    pub fn penalty<T: Scalar>(self, f: &Matrix<T>) -> T {
        match self {
            Self::L21 => row_l2_norms(f).into_iter().fold(T::zero(), |a, b| a + b),
            Self::L20 => T::lit(row_support(f).iter().filter(|&&s| s).count() as f64),
            Self::L1 => f.data().iter().fold(T::zero(), |a, &b| a + b.abs()),
        }
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::L21 => "l21",
            Self::L20 => "l20",
            Self::L1 => "l1",
        })
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l21" | "l2,1" => Ok(Self::L21),
            "l20" | "l2,0" => Ok(Self::L20),
            "l1" => Ok(Self::L1),
            other => input_err(format!("unknown regularizer {other:?} (expected l21, l20 or l1)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxInput<T = f32> {
    pub t2: Matrix<T>,
    pub lambda: T,
    pub rho: T,
}

impl<T: Scalar> ProxInput<T> {
    pub fn new(t2: Matrix<T>, lambda: T, rho: T) -> Result<Self> {
        if !(rho > T::zero()) || !rho.is_finite() {
            return input_err("rho must be positive");
        }
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return input_err("lambda must be nonnegative");
        }
        Ok(Self { t2, lambda, rho })
    }

    /// `λ·g(F) + (ρ/2)‖F − T₂‖²_F`.
    pub fn objective(&self, kind: RegularizerKind, f: &Matrix<T>) -> T {
        let dist: T = f
            .data()
            .iter()
            .zip(self.t2.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        self.lambda * kind.penalty(f) + self.rho * T::lit(0.5) * dist
    }
}

/// Row-wise group shrinkage: `tᵢ · max(‖tᵢ‖ − λ/ρ, 0) / ‖tᵢ‖`.
pub fn prox_l21<T: Scalar>(input: &ProxInput<T>) -> Matrix<T> {
    let thresh = input.lambda / input.rho;
    let norms = row_l2_norms(&input.t2);
    let mut out = input.t2.clone();
    for (i, &n) in norms.iter().enumerate() {
        let row = out.row_mut(i);
        if n <= thresh || n == T::zero() {
            row.fill(T::zero());
        } else {
            let s = (n - thresh) / n;
            row.iter_mut().for_each(|v| *v = *v * s);
        }
    }
    out
}

/// Row-wise hard threshold: a row is zeroed when `λ ≥ (ρ/2)‖tᵢ‖²` and
/// returned unchanged otherwise.
pub fn prox_l20<T: Scalar>(input: &ProxInput<T>) -> Matrix<T> {
    let half_rho = input.rho * T::lit(0.5);
    let norms = row_l2_norms(&input.t2);
    let mut out = input.t2.clone();
    for (i, &n) in norms.iter().enumerate() {
        if input.lambda >= half_rho * n * n {
            out.row_mut(i).fill(T::zero());
        }
    }
    out
}

/// Elementwise soft threshold: `sign(t)·max(|t| − λ/ρ, 0)`.
pub fn prox_l1<T: Scalar>(input: &ProxInput<T>) -> Matrix<T> {
    let thresh = input.lambda / input.rho;
    input.t2.map(|t| {
        let m = t.abs() - thresh;
        if m > T::zero() {
            if t >= T::zero() {
                m
            } else {
                -m
            }
        } else {
            T::zero()
        }
    })
}

pub fn prox<T: Scalar>(kind: RegularizerKind, input: &ProxInput<T>) -> Matrix<T> {
    match kind {
        RegularizerKind::L21 => prox_l21(input),
        RegularizerKind::L20 => prox_l20(input),
        RegularizerKind::L1 => prox_l1(input),
    }
}

/// `true` for rows holding at least one nonzero entry.
pub fn row_support<T: Scalar>(f: &Matrix<T>) -> Vec<bool> {
    (0..f.rows())
        .map(|i| f.row(i).iter().any(|v| v.abs() > T::zero()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn input(rows: &[Vec<f64>], lambda: f64, rho: f64) -> ProxInput<f64> {
        ProxInput::new(Matrix::from_rows(rows).unwrap(), lambda, rho).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn lambda_zero_is_identity() {
        let p = input(&[vec![0.3, -1.0], vec![0.0, 0.0], vec![2.0, 0.5]], 0.0, 1.0);
        assert_eq!(prox_l21(&p), p.t2);
        assert_eq!(prox_l1(&p), p.t2);
        let q = input(&[vec![0.3, -1.0], vec![2.0, 0.5]], 0.0, 1.0);
        assert_eq!(prox_l20(&q), q.t2);
    }

    #[test]
    fn l21_shrinks_three_four_row() {
        let out = prox_l21(&input(&[vec![3.0, 4.0], vec![0.0, 0.0], vec![0.6, 0.8]], 1.0, 1.0));
        assert!((out.get(0, 0) - 2.4).abs() < 1e-12);
        assert!((out.get(0, 1) - 3.2).abs() < 1e-12);
        assert_eq!(out.row(1), &[0.0, 0.0]);
        assert_eq!(out.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn l20_boundary_row_is_zeroed() {
        let out = prox_l20(&input(&[vec![1.0, 0.0], vec![1.0, 0.1]], 0.5, 1.0));
        assert_eq!(out.row(0), &[0.0, 0.0]);
        assert_eq!(out.row(1), &[1.0, 0.1]);
    }

    #[test]
    fn l1_soft_thresholds() {
        let out = prox_l1(&input(&[vec![0.7, -0.3, -0.9, 0.0]], 0.5, 1.0));
        let want = [0.2, 0.0, -0.4, 0.0];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn supports_follow_the_branches() {
        assert_eq!(row_support(&Matrix::<f32>::zeros(3, 2)), vec![false; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t2 = random_matrix(&mut rng, 6, 4);
            let norms = row_l2_norms(&t2);
            let p = ProxInput::new(t2, 1.5, 1.0).unwrap();
            let s20 = row_support(&prox_l20(&p));
            let s21 = row_support(&prox_l21(&p));
            for (i, &n) in norms.iter().enumerate() {
                assert_eq!(s20[i], 1.5 < 0.5 * n * n);
                assert_eq!(s21[i], n > 1.5);
            }
        }
    }

    #[test]
    fn l20_matches_two_candidate_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let t2 = random_matrix(&mut rng, 6, 4);
            let lambda = rng.random_range(0.0..4.0);
            let rho = rng.random_range(0.25..3.0);
            let p = ProxInput::new(t2.clone(), lambda, rho).unwrap();
            let out = prox_l20(&p);
            for i in 0..6 {
                let row = t2.row(i);
                let sq: f64 = row.iter().map(|v| v * v).sum();
                // candidate 0 costs (ρ/2)‖t‖², candidate t costs λ
                let zero_cost = 0.5 * rho * sq;
                let want_zero = zero_cost <= lambda;
                if want_zero {
                    assert!(out.row(i).iter().all(|&v| v == 0.0));
                } else {
                    assert_eq!(out.row(i), row);
                }
            }
        }
    }

    #[test]
    fn l1_matches_scalar_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let t: f64 = StandardNormal.sample(&mut rng);
            let lambda = rng.random_range(0.0..1.5);
            let rho = rng.random_range(0.5..2.0);
            let p = ProxInput::new(Matrix::from_vec(1, 1, vec![t]).unwrap(), lambda, rho).unwrap();
            let got = prox_l1(&p).get(0, 0);
            let span = 2.0 * t.abs();
            let steps = (2.0 * span / 1e-4) as usize;
            let mut best = (f64::INFINITY, 0.0);
            for s in 0..=steps {
                let f = -span + s as f64 * 1e-4;
                let obj = lambda * f.abs() + 0.5 * rho * (f - t) * (f - t);
                if obj < best.0 {
                    best = (obj, f);
                }
            }
            assert!((got - best.1).abs() < 1e-3, "t={t} got={got} grid={}", best.1);
        }
    }

    #[test]
    fn beats_random_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for kind in RegularizerKind::ALL {
            for _ in 0..5 {
                let t2 = random_matrix(&mut rng, 4, 3);
                let p = ProxInput::new(t2, rng.random_range(0.0..2.0), 1.0).unwrap();
                let f = prox(kind, &p);
                let base = p.objective(kind, &f);
                for _ in 0..1000 {
                    let scale = 10f64.powf(rng.random_range(-4.0..0.0));
                    let noise = random_matrix(&mut rng, 4, 3).scale(scale);
                    let g = f.add(&noise).unwrap();
                    assert!(base <= p.objective(kind, &g) + 1e-9, "{kind}");
                }
            }
        }
    }

    #[test]
    fn parses_kind_names() {
        assert_eq!("L2,0".parse::<RegularizerKind>().unwrap(), RegularizerKind::L20);
        assert_eq!(RegularizerKind::L21.to_string().parse::<RegularizerKind>().unwrap(), RegularizerKind::L21);
        assert!("l3".parse::<RegularizerKind>().is_err());
        assert!(ProxInput::new(Matrix::<f32>::zeros(1, 1), 0.1, 0.0).is_err());
        assert!(ProxInput::new(Matrix::<f32>::zeros(1, 1), -0.1, 1.0).is_err());
    }

    fn matrix_strategy() -> impl Strategy<Value = Matrix<f64>> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn survivors_non_increasing_in_lambda(t2 in matrix_strategy(), a in 0.0f64..3.0, b in 0.0f64..3.0, rho in 0.1f64..3.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let p_lo = ProxInput::new(t2.clone(), lo, rho).unwrap();
            let p_hi = ProxInput::new(t2, hi, rho).unwrap();
            let count = |m: &Matrix<f64>| row_support(m).iter().filter(|&&s| s).count();
            prop_assert!(count(&prox_l21(&p_hi)) <= count(&prox_l21(&p_lo)));
            prop_assert!(count(&prox_l20(&p_hi)) <= count(&prox_l20(&p_lo)));
            let nnz = |m: &Matrix<f64>| m.data().iter().filter(|v| **v != 0.0).count();
            prop_assert!(nnz(&prox_l1(&p_hi)) <= nnz(&prox_l1(&p_lo)));
        }

        #[test]
        fn l20_keeps_or_kills(t2 in matrix_strategy(), lambda in 0.0f64..3.0, rho in 0.1f64..3.0) {
            let p = ProxInput::new(t2.clone(), lambda, rho).unwrap();
            let out = prox_l20(&p);
            for i in 0..t2.rows() {
                prop_assert!(out.row(i) == t2.row(i) || out.row(i).iter().all(|&v| v == 0.0));
            }
        }

        #[test]
        fn l21_scales_positively(t2 in matrix_strategy(), lambda in 0.0f64..3.0, c in 0.1f64..5.0) {
            let base = prox_l21(&ProxInput::new(t2.clone(), lambda, 1.0).unwrap());
            let scaled = prox_l21(&ProxInput::new(t2.scale(c), c * lambda, 1.0).unwrap());
            for (x, y) in scaled.data().iter().zip(base.data()) {
                prop_assert!((x - c * y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn l21_and_l1_are_non_expansive(
            (a, b) in matrix_strategy().prop_flat_map(|m| {
                let (r, c) = m.shape();
                (Just(m), prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Matrix::from_vec(r, c, d).unwrap()))
            }),
            lambda in 0.0f64..3.0,
            rho in 0.1f64..3.0,
        ) {
            let pa = ProxInput::new(a.clone(), lambda, rho).unwrap();
            let pb = ProxInput::new(b.clone(), lambda, rho).unwrap();
            let input_gap = a.sub(&b).unwrap().frobenius_norm();
            for kind in [RegularizerKind::L21, RegularizerKind::L1] {
                let gap = prox(kind, &pa).sub(&prox(kind, &pb)).unwrap().frobenius_norm();
                prop_assert!(gap <= input_gap + 1e-12);
            }
        }
    }
}
