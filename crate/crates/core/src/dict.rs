//! Synthesis-dictionary view of a layer and its transform/metric counterpart.
//!
//! A layer computes the sparse code
//!
//! `M_D(x) = argmin_{a ≥ 0} ½‖x − Da‖² + λ‖a‖₁ + (β/2)‖a‖² + (α/2)‖a‖² + dᵀa`.
//!
//! With `Q = DᵀD + αI`, `F = Q⁻¹Dᵀ` and `c = Q⁻¹d`, the same code is the
//! Q-metric proximity operator of `λ‖·‖₁ + (β/2)‖·‖² + ι_{≥0}` evaluated at
//! `Fx − c`. [`theorem1_check`] compares the two routes numerically.

use crate::error::{Error, Result};
use crate::oracle::{nonneg_l1_minimize, OracleOptions};
use crate::qmetric;
use crate::tensor::{RealMatrix, RealVector};

/// Smallest strong-convexity weight accepted; smaller values are raised to it.
pub const ALPHA_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct DictionaryFactor {
    /// `m × k` synthesis dictionary.
    pub dict: RealMatrix,
    pub alpha: f64,
    pub lambda: f64,
    pub beta: f64,
    /// Linear shift `d` (length `k`).
    pub shift: RealVector,
}

impl DictionaryFactor {
    pub fn new(dict: RealMatrix, alpha: f64, lambda: f64, beta: f64, shift: RealVector) -> Result<Self> {
        if shift.len() != dict.ncols() {
            return Err(Error::shape(format!(
                "shift has length {}, dictionary has {} atoms",
                shift.len(),
                dict.ncols()
            )));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be non-negative, got {alpha}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be non-negative, got {beta}")));
        }
        let alpha = if alpha < ALPHA_FLOOR {
            log::warn!("alpha {alpha} raised to {ALPHA_FLOOR} to keep Q positive definite");
            ALPHA_FLOOR
        } else {
            alpha
        };
        Ok(DictionaryFactor {
            dict,
            alpha,
            lambda,
            beta,
            shift,
        })
    }

    /// Factor with `d = 0`.
    pub fn unshifted(dict: RealMatrix, alpha: f64, lambda: f64, beta: f64) -> Result<Self> {
        let k = dict.ncols();
        Self::new(dict, alpha, lambda, beta, RealVector::zeros(k))
    }

    pub fn atoms(&self) -> usize {
        self.dict.ncols()
    }

    pub fn signal_dim(&self) -> usize {
        self.dict.nrows()
    }

    /// `Q = DᵀD + αI`.
    pub fn metric(&self) -> RealMatrix {
        let k = self.atoms();
        self.dict.transpose() * &self.dict + RealMatrix::identity(k, k) * self.alpha
    }

    /// Layer objective at code `a`; `+∞` outside the nonnegative orthant.
    pub fn objective(&self, x: &RealVector, a: &RealVector) -> f64 {
        if a.iter().any(|&v| v < 0.0) {
            return f64::INFINITY;
        }
        let r = x - &self.dict * a;
        0.5 * r.norm_squared()
            + self.lambda * a.sum()
            + 0.5 * (self.alpha + self.beta) * a.norm_squared()
            + self.shift.dot(a)
    }
}

#[derive(Clone, Debug)]
pub struct TransformTriple {
    /// `k × k` SPD metric.
    pub q: RealMatrix,
    /// `k × m` analysis transform.
    pub f: RealMatrix,
    /// Bias of length `k`.
    pub c: RealVector,
}

impl TransformTriple {
    /// `Fx − c`
    pub fn apply(&self, x: &RealVector) -> RealVector {
        &self.f * x - &self.c
    }
}

/// Solves `Q X = B` through a Cholesky factor of `Q`. If the factorization fails
/// the system is regularized with a small multiple of the identity.
pub fn spd_solve(q: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix> {
    if let Some(ch) = q.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    let k = q.nrows();
    let eps = 1e-12 * q.diagonal().amax().max(1.0);
    log::warn!("Cholesky failed; solving with {eps:e}·I regularization");
    let ch = (q + RealMatrix::identity(k, k) * eps)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite)?;
    Ok(ch.solve(b))
}

/// `(Q, F, c)` with `F` and `c` from linear solves against `Q` (no explicit inverse).
pub fn sdl_to_transform(f: &DictionaryFactor) -> Result<TransformTriple> {
    let q = f.metric();
    let ft = spd_solve(&q, &f.dict.transpose())?;
    let shift = RealMatrix::from_column_slice(f.atoms(), 1, f.shift.as_slice());
    let c = spd_solve(&q, &shift)?.column(0).into_owned();
    Ok(TransformTriple { q, f: ft, c })
}

/// The layer operator evaluated directly on its defining objective.
pub fn md_direct(f: &DictionaryFactor, x: &RealVector) -> Result<RealVector> {
    md_direct_with(f, x, OracleOptions::default())
}

pub fn md_direct_with(f: &DictionaryFactor, x: &RealVector, opts: OracleOptions) -> Result<RealVector> {
    if x.len() != f.signal_dim() {
        return Err(Error::shape(format!(
            "signal has length {}, dictionary rows {}",
            x.len(),
            f.signal_dim()
        )));
    }
    let ridge = f.alpha + f.beta;
    let grad = |a: &RealVector| {
        let r = &f.dict * a - x;
        f.dict.tr_mul(&r) + a * ridge + &f.shift
    };
    Ok(nonneg_l1_minimize(RealVector::zeros(f.atoms()), f.lambda, grad, opts)?.x)
}

#[derive(Clone, Debug)]
pub struct Theorem1Report {
    pub direct: RealVector,
    pub via_prox: RealVector,
    pub max_abs_diff: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares `M_D(x)` with `prox^Q_{λψ}(Fx − c)`.
pub fn theorem1_check(f: &DictionaryFactor, x: &RealVector, tol: f64) -> Result<Theorem1Report> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let direct = md_direct(f, x)?;
    let tt = sdl_to_transform(f)?;
    let z = tt.apply(x);
    let zm = RealMatrix::from_column_slice(z.len(), 1, z.as_slice());
    let via_prox = qmetric::qprox_oracle(&tt.q, &zm, f.lambda, f.beta)?
        .column(0)
        .into_owned();
    let max_abs_diff = (&direct - &via_prox).amax();
    Ok(Theorem1Report {
        direct,
        via_prox,
        max_abs_diff,
        tol,
        passed: max_abs_diff <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn random_factor(rng: &mut Rng, m: usize, k: usize, alpha: f64, shifted: bool) -> DictionaryFactor {
        let d = RealMatrix::from_fn(m, k, |_, _| rng.normal(0.0, 1.0));
        let shift = RealVector::from_fn(k, |_, _| if shifted { rng.normal(0.0, 0.5) } else { 0.0 });
        DictionaryFactor::new(d, alpha, 0.3, 0.05, shift).unwrap()
    }

    #[test]
    fn zero_dictionary_transform() {
        let f = DictionaryFactor::unshifted(RealMatrix::zeros(2, 3), 1.0, 1.0, 0.0).unwrap();
        let t = sdl_to_transform(&f).unwrap();
        assert_eq!(t.q, RealMatrix::identity(3, 3));
        assert_eq!(t.f.amax(), 0.0);
        assert_eq!(t.c.amax(), 0.0);
    }

    #[test]
    fn identity_dictionary_transform() {
        let f = DictionaryFactor::new(
            RealMatrix::identity(2, 2),
            1.0,
            1.0,
            0.0,
            RealVector::from_vec(vec![2.0, 2.0]),
        )
        .unwrap();
        let t = sdl_to_transform(&f).unwrap();
        assert!((t.q.clone() - RealMatrix::identity(2, 2) * 2.0).amax() < 1e-15);
        assert!((t.f.clone() - RealMatrix::identity(2, 2) * 0.5).amax() < 1e-15);
        assert!((t.c.clone() - RealVector::from_vec(vec![1.0, 1.0])).amax() < 1e-15);
    }

    #[test]
    fn transform_residuals() {
        let mut rng = Rng::new(17);
        let f = random_factor(&mut rng, 4, 6, 0.5, true);
        let t = sdl_to_transform(&f).unwrap();
        assert!((&t.q * &t.f - f.dict.transpose()).amax() <= 1e-10);
        assert!((&t.q * &t.c - &f.shift).amax() <= 1e-10);
        assert!((t.q.clone() - t.q.transpose()).amax() == 0.0);
        let min_eig = t.q.clone().symmetric_eigenvalues().min();
        assert!(min_eig >= f.alpha - 1e-10);
    }

    #[test]
    fn zero_dictionary_code_is_zero() {
        let f = DictionaryFactor::unshifted(RealMatrix::zeros(3, 2), 1.0, 1.0, 0.0).unwrap();
        let a = md_direct(&f, &RealVector::from_vec(vec![5.0, -1.0, 2.0])).unwrap();
        assert_eq!(a.amax(), 0.0);
    }

    #[test]
    fn scalar_shrinkage_with_alpha_guard() {
        let f = DictionaryFactor::unshifted(RealMatrix::identity(1, 1), 0.0, 0.5, 0.0).unwrap();
        assert_eq!(f.alpha, ALPHA_FLOOR);
        let a = md_direct(&f, &RealVector::from_vec(vec![2.0])).unwrap();
        assert!((a[0] - 1.5).abs() < 1e-8, "{}", a[0]);
    }

    #[test]
    fn signal_length_checked() {
        let f = DictionaryFactor::unshifted(RealMatrix::zeros(3, 2), 1.0, 1.0, 0.0).unwrap();
        assert!(md_direct(&f, &RealVector::zeros(2)).is_err());
        assert!(DictionaryFactor::new(RealMatrix::zeros(3, 2), 1.0, 1.0, 0.0, RealVector::zeros(3)).is_err());
        assert!(DictionaryFactor::unshifted(RealMatrix::zeros(3, 2), -1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn md_direct_beats_local_grid() {
        // Grid of ±3 steps of 1e-3 in each of 6 coordinates around the solution.
        let mut rng = Rng::new(99);
        let f = random_factor(&mut rng, 4, 6, 0.5, false);
        let x = RealVector::from_fn(4, |_, _| rng.normal(0.0, 2.0));
        let a = md_direct(&f, &x).unwrap();
        let best = f.objective(&x, &a);
        let mut grid_best = (f64::INFINITY, a.clone());
        let mut idx = [0usize; 6];
        loop {
            let cand = RealVector::from_fn(6, |i, _| a[i] + (idx[i] as f64 - 3.0) * 1e-3);
            let v = f.objective(&x, &cand);
            if v < grid_best.0 {
                grid_best = (v, cand);
            }
            let mut d = 0;
            while d < 6 {
                idx[d] += 1;
                if idx[d] < 7 {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == 6 {
                break;
            }
        }
        assert!(best <= grid_best.0 + 1e-12);
        assert!((grid_best.1 - &a).amax() < 1e-3);
    }

    #[test]
    fn md_direct_nonnegative_and_minimal() {
        let mut rng = Rng::new(5);
        let f = random_factor(&mut rng, 5, 7, 0.2, true);
        let x = RealVector::from_fn(5, |_, _| rng.normal(0.0, 1.0));
        let a = md_direct(&f, &x).unwrap();
        assert!(a.iter().all(|&v| v >= 0.0));
        let best = f.objective(&x, &a);
        for _ in 0..1000 {
            let p = RealVector::from_fn(7, |i, _| (a[i] + rng.normal(0.0, 0.05)).max(0.0));
            assert!(best <= f.objective(&x, &p) + 1e-12);
        }
    }

    #[test]
    fn theorem1_zero_dictionary_and_shifted() {
        let f = DictionaryFactor::unshifted(RealMatrix::zeros(2, 3), 1.0, 1.0, 0.0).unwrap();
        let r = theorem1_check(&f, &RealVector::from_vec(vec![1.0, 2.0]), 1e-6).unwrap();
        assert!(r.passed && r.max_abs_diff == 0.0);

        let mut rng = Rng::new(8);
        let f = random_factor(&mut rng, 6, 9, 0.3, true);
        let x = RealVector::from_fn(6, |_, _| rng.normal(0.0, 1.0));
        let r = theorem1_check(&f, &x, 1e-6).unwrap();
        assert!(r.passed, "diff {}", r.max_abs_diff);
        assert!(theorem1_check(&f, &x, 0.0).is_err());
    }
}
