//! Reference solver shared by the slow oracles: projected proximal gradient for
//!
//! `min_{x ≥ 0} f(x) + λ‖x‖₁`
//!
//! with `f` smooth. The ℓ1 + nonnegativity prox is the exact scalar map
//! `v ↦ max(v − sλ, 0)`. The step is found by backtracking on the local Lipschitz
//! estimate `‖∇f(x⁺) − ∇f(x)‖ / ‖x⁺ − x‖ ≤ 1/s`, which stays well-posed near the
//! optimum where objective differences drown in rounding.

use crate::error::{Error, Result};
use crate::tensor::RealVector;

#[derive(Clone, Copy, Debug)]
pub struct OracleOptions {
    /// Stationarity target on the gradient mapping `‖x − x⁺‖∞ / s`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            tol: 1e-12,
            max_iter: 1_000_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub x: RealVector,
    pub iterations: usize,
    pub residual: f64,
}

fn prox_step(x: &RealVector, g: &RealVector, s: f64, lambda: f64) -> RealVector {
    RealVector::from_iterator(
        x.len(),
        x.iter().zip(g.iter()).map(|(&xi, &gi)| (xi - s * gi - s * lambda).max(0.0)),
    )
}

/// Minimizes `f + λ‖·‖₁ + ι_{≥0}` from `x0` given `∇f`.
pub fn nonneg_l1_minimize(
    x0: RealVector,
    lambda: f64,
    grad: impl Fn(&RealVector) -> RealVector,
    opts: OracleOptions,
) -> Result<OracleSolution> {
    let mut x = x0.map(|v| v.max(0.0));
    let mut g = grad(&x);
    let mut s = 1.0;
    let mut residual = f64::INFINITY;
    for it in 0..opts.max_iter {
        let (x_next, g_next) = loop {
            let cand = prox_step(&x, &g, s, lambda);
            let dx = &cand - &x;
            let dx_norm = dx.norm();
            if dx_norm == 0.0 {
                break (cand, g.clone());
            }
            let gc = grad(&cand);
            let dg = (&gc - &g).norm();
            if s * dg <= dx_norm * (1.0 + 1e-12) {
                break (cand, gc);
            }
            s *= 0.5;
            if s < 1e-300 {
                return Err(Error::NoConvergence {
                    iterations: it,
                    residual,
                });
            }
        };
        residual = (&x - &x_next).amax() / s;
        x = x_next;
        g = g_next;
        if !residual.is_finite() {
            return Err(Error::NonFinite("oracle solver"));
        }
        if residual <= opts.tol {
            return Ok(OracleSolution {
                x,
                iterations: it + 1,
                residual,
            });
        }
        s *= 1.25;
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        residual,
    })
}
