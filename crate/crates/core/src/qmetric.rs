//! Proximity operator in the metric induced by an SPD matrix `Q`:
//!
//! `prox(Z) = argmin_{U ≥ 0} ½‖U − Z‖²_{F,Q} + (β/2)‖U‖²_F + λ‖U‖₁`
//!
//! computed three ways:
//!
//! - [`qprox_iterate`]: the recurrent update
//!   `U ← ReLU(h ⊙ Z + W̃(U − Z) − b)` with `(W̃, h, b)` from [`build_reparams`];
//! - [`fb_precond_iterate`]: diagonally preconditioned forward-backward;
//! - [`qprox_oracle`]: column-wise projected proximal gradient (reference).
//!
//! The recurrent update equals forward-backward with `Θ = diag(Q)` and `γ = 1`,
//! so it converges whenever `1 < 2 / ‖Θ^{-1/2} Q Θ^{-1/2}‖`. [`qprox_solve`]
//! checks that bound and falls back to a smaller stepsize when it fails.

use crate::error::{Error, Result};
use crate::oracle::{nonneg_l1_minimize, OracleOptions};
use crate::tensor::{RealMatrix, RealVector};

/// Learned triple of the Q-metric ReLU plus its unroll count.
#[derive(Clone, Debug, PartialEq)]
pub struct QMetricParams {
    wtilde: RealMatrix,
    h: RealVector,
    b: RealVector,
    t_max: usize,
}

impl QMetricParams {
    /// Validates `diag(W̃) = 0`, `h ∈ [0,1]ᵏ`, `b ≥ 0`, `T ≥ 1`.
    pub fn new(wtilde: RealMatrix, h: RealVector, b: RealVector, t_max: usize) -> Result<Self> {
        let k = h.len();
        if wtilde.shape() != (k, k) || b.len() != k {
            return Err(Error::shape(format!(
                "W̃ {:?}, h {}, b {}",
                wtilde.shape(),
                k,
                b.len()
            )));
        }
        if (0..k).any(|i| wtilde[(i, i)] != 0.0) {
            return Err(Error::invalid("W̃ must have a zero diagonal"));
        }
        if h.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("h must lie in [0, 1]"));
        }
        if b.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("b must be non-negative"));
        }
        if t_max == 0 {
            return Err(Error::invalid("unroll count must be positive"));
        }
        Ok(QMetricParams { wtilde, h, b, t_max })
    }

    pub fn wtilde(&self) -> &RealMatrix {
        &self.wtilde
    }

    pub fn h(&self) -> &RealVector {
        &self.h
    }

    pub fn b(&self) -> &RealVector {
        &self.b
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }
}

fn check_spd_diag(q: &RealMatrix) -> Result<()> {
    if !q.is_square() {
        return Err(Error::shape(format!("Q must be square, got {:?}", q.shape())));
    }
    if q.diagonal().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(())
}

/// `W̃_{iℓ} = −q_{iℓ}/(q_{ii}+β)` off the diagonal, `h_i = q_{ii}/(q_{ii}+β)`,
/// `b_i = λ/(q_{ii}+β)`.
pub fn build_reparams(q: &RealMatrix, lambda: f64, beta: f64, t_max: usize) -> Result<QMetricParams> {
    check_spd_diag(q)?;
    if !(lambda >= 0.0) || !(beta >= 0.0) {
        return Err(Error::invalid("lambda and beta must be non-negative"));
    }
    let k = q.nrows();
    let denom = RealVector::from_fn(k, |i, _| q[(i, i)] + beta);
    let wtilde = RealMatrix::from_fn(k, k, |i, l| if i == l { 0.0 } else { -q[(i, l)] / denom[i] });
    let h = RealVector::from_fn(k, |i, _| q[(i, i)] / denom[i]);
    let b = denom.map(|d| lambda / d);
    QMetricParams::new(wtilde, h, b, t_max)
}

#[derive(Clone, Debug)]
pub struct IterOutcome {
    pub u: RealMatrix,
    pub iterations: usize,
    /// `false` when the unroll limit was reached before the tolerance.
    pub converged: bool,
}

/// One recurrent step with unconstrained `w` (diagonal allowed).
fn relu_step(z: &RealMatrix, u: &RealMatrix, w: &RealMatrix, h: &RealVector, b: &RealVector) -> RealMatrix {
    let mut a = w * (u - z);
    for j in 0..z.ncols() {
        for i in 0..z.nrows() {
            a[(i, j)] = (a[(i, j)] + h[i] * z[(i, j)] - b[i]).max(0.0);
        }
    }
    a
}

fn run_recurrence(
    z: &RealMatrix,
    w: &RealMatrix,
    h: &RealVector,
    b: &RealVector,
    t_max: usize,
    tol: Option<f64>,
) -> IterOutcome {
    let mut u = RealMatrix::zeros(z.nrows(), z.ncols());
    for t in 0..t_max {
        let next = relu_step(z, &u, w, h, b);
        let delta = (&next - &u).amax();
        u = next;
        if tol.is_some_and(|tol| delta <= tol) {
            return IterOutcome {
                u,
                iterations: t + 1,
                converged: true,
            };
        }
    }
    IterOutcome {
        u,
        iterations: t_max,
        converged: tol.is_none(),
    }
}

/// Recurrent Q-metric ReLU from `U₀ = 0`, columns of `z` are samples.
/// Stops when `‖U_{t+1} − U_t‖∞ ≤ tol` or after `T` steps; `tol = None` runs
/// exactly `T` steps.
pub fn qprox_iterate(z: &RealMatrix, p: &QMetricParams, tol: Option<f64>) -> Result<IterOutcome> {
    if z.nrows() != p.dim() {
        return Err(Error::shape(format!("Z has {} rows, params {}", z.nrows(), p.dim())));
    }
    Ok(run_recurrence(z, &p.wtilde, &p.h, &p.b, p.t_max, tol))
}

/// `½ tr((U−Z)ᵀQ(U−Z)) + (β/2)‖U‖² + λ‖U‖₁`, `+∞` if `U` has a negative entry.
pub fn prox_objective(q: &RealMatrix, z: &RealMatrix, u: &RealMatrix, lambda: f64, beta: f64) -> f64 {
    if u.iter().any(|&v| v < 0.0) {
        return f64::INFINITY;
    }
    let d = u - z;
    0.5 * (d.transpose() * q * &d).trace() + 0.5 * beta * u.norm_squared() + lambda * u.sum()
}

/// `‖A‖_{F,Q} = sqrt(tr(Aᵀ Q A))` for `k × N` matrices `A`.
pub fn q_norm(q: &RealMatrix, a: &RealMatrix) -> f64 {
    (a.transpose() * q * a).trace().max(0.0).sqrt()
}

/// Reference prox: every column minimized independently by projected proximal gradient.
pub fn qprox_oracle(q: &RealMatrix, z: &RealMatrix, lambda: f64, beta: f64) -> Result<RealMatrix> {
    qprox_oracle_with(q, z, lambda, beta, OracleOptions::default())
}

pub fn qprox_oracle_with(
    q: &RealMatrix,
    z: &RealMatrix,
    lambda: f64,
    beta: f64,
    opts: OracleOptions,
) -> Result<RealMatrix> {
    check_spd_diag(q)?;
    if z.nrows() != q.nrows() {
        return Err(Error::shape(format!("Z has {} rows, Q is {}", z.nrows(), q.nrows())));
    }
    let cols: Vec<Result<RealVector>> = crate::par::map(z.ncols(), |j| {
        let zj = z.column(j).into_owned();
        let grad = |u: &RealVector| q * (u - &zj) + u * beta;
        Ok(nonneg_l1_minimize(RealVector::zeros(zj.len()), lambda, grad, opts)?.x)
    });
    let mut out = RealMatrix::zeros(z.nrows(), z.ncols());
    for (j, c) in cols.into_iter().enumerate() {
        out.set_column(j, &c?);
    }
    Ok(out)
}

/// Largest violation of the coordinate-wise fixed-point conditions
///
/// `u_{ij} = max(0, h_i z_{ij} − v_{ij})`,
/// `v_{ij} = (λ + Σ_{ℓ≠i} q_{iℓ}(u_{ℓj} − z_{ℓj})) / (q_{ii} + β)`.
///
/// Zero exactly at the prox.
pub fn fixed_point_residual(u: &RealMatrix, q: &RealMatrix, z: &RealMatrix, lambda: f64, beta: f64) -> f64 {
    let (k, n) = z.shape();
    let d = u - z;
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in 0..k {
            let qii = q[(i, i)];
            let cross: f64 = (0..k).filter(|&l| l != i).map(|l| q[(i, l)] * d[(l, j)]).sum();
            let v = (lambda + cross) / (qii + beta);
            let expect = if qii * z[(i, j)] > (qii + beta) * v {
                qii / (qii + beta) * z[(i, j)] - v
            } else {
                0.0
            };
            worst = worst.max((u[(i, j)] - expect).abs());
        }
    }
    worst
}

/// Largest eigenvalue magnitude of a symmetric matrix by power iteration
/// (200 steps, relative tolerance `1e-10`).
pub fn spectral_norm(a: &RealMatrix) -> f64 {
    let k = a.nrows();
    if k == 0 {
        return 0.0;
    }
    let mut v = RealVector::from_fn(k, |i, _| 1.0 + 0.01 * i as f64);
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..200 {
        let w = a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (norm - est).abs() <= 1e-10 * norm {
            return norm;
        }
        est = norm;
    }
    est
}

/// `2 / ‖Θ^{-1/2} Q Θ^{-1/2}‖` for diagonal `Θ`.
pub fn stepsize_bound(q: &RealMatrix, theta: &RealVector) -> f64 {
    let s = theta.map(|t| 1.0 / t.sqrt());
    let m = RealMatrix::from_fn(q.nrows(), q.ncols(), |i, l| s[i] * q[(i, l)] * s[l]);
    2.0 / spectral_norm(&m)
}

/// Diagonal preconditioner and stepsize of the forward-backward scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecondParams {
    theta: RealVector,
    gamma: f64,
}

impl PrecondParams {
    /// Rejects `γ ≥ 2 / ‖Θ^{-1/2} Q Θ^{-1/2}‖`.
    pub fn new(theta: RealVector, gamma: f64, q: &RealMatrix) -> Result<Self> {
        check_spd_diag(q)?;
        if theta.len() != q.nrows() {
            return Err(Error::shape("Θ and Q sizes differ"));
        }
        if theta.iter().any(|&t| !(t > 0.0)) || !(gamma > 0.0) {
            return Err(Error::invalid("Θ and γ must be positive"));
        }
        let bound = stepsize_bound(q, &theta);
        if gamma >= bound {
            return Err(Error::StepsizeBound { gamma, bound });
        }
        Ok(PrecondParams { theta, gamma })
    }

    /// `Θ = diag(Q)`.
    pub fn diagonal(q: &RealMatrix, gamma: f64) -> Result<Self> {
        Self::new(q.diagonal(), gamma, q)
    }

    pub fn theta(&self) -> &RealVector {
        &self.theta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Recurrent parameters produced by one forward-backward step:
/// `W̃ = (Θ + γβI)⁻¹(Θ − γQ)`, `h_i = θ_i/(θ_i + γβ)`, `b_i = γλ/(θ_i + γβ)`.
/// `W̃` has a zero diagonal only when `Θ = γ·diag(Q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FbReparams {
    pub wtilde: RealMatrix,
    pub h: RealVector,
    pub b: RealVector,
}

pub fn fb_reparams(q: &RealMatrix, lambda: f64, beta: f64, theta: &RealVector, gamma: f64) -> FbReparams {
    let k = q.nrows();
    let denom = theta.map(|t| t + gamma * beta);
    let wtilde = RealMatrix::from_fn(k, k, |i, l| {
        let th = if i == l { theta[i] } else { 0.0 };
        (th - gamma * q[(i, l)]) / denom[i]
    });
    FbReparams {
        wtilde,
        h: RealVector::from_fn(k, |i, _| theta[i] / denom[i]),
        b: denom.map(|d| gamma * lambda / d),
    }
}

impl FbReparams {
    /// Converts to [`QMetricParams`] when the invariants hold.
    pub fn into_qmetric(self, t_max: usize) -> Result<QMetricParams> {
        QMetricParams::new(self.wtilde, self.h, self.b, t_max)
    }
}

/// Preconditioned forward-backward from `U₀ = 0`:
///
/// `U ← prox^Θ_{γλψ}((I − γΘ⁻¹Q)(U − Z) + Z)`, with the scalar prox
/// `u ↦ ReLU(θ_i u/(θ_i + γβ) − γλ/(θ_i + γβ))`.
pub fn fb_precond_iterate(
    z: &RealMatrix,
    q: &RealMatrix,
    lambda: f64,
    beta: f64,
    pp: &PrecondParams,
    t_max: usize,
    tol: Option<f64>,
) -> Result<IterOutcome> {
    check_spd_diag(q)?;
    if z.nrows() != q.nrows() || pp.theta.len() != q.nrows() {
        return Err(Error::shape("Z, Q and Θ sizes differ"));
    }
    let (k, n) = z.shape();
    let g = pp.gamma;
    let mut u = RealMatrix::zeros(k, n);
    for t in 0..t_max {
        let d = &u - z;
        let qd = q * &d;
        let mut next = RealMatrix::zeros(k, n);
        for j in 0..n {
            for i in 0..k {
                let th = pp.theta[i];
                let fwd = d[(i, j)] - g * qd[(i, j)] / th + z[(i, j)];
                next[(i, j)] = (th * fwd / (th + g * beta) - g * lambda / (th + g * beta)).max(0.0);
            }
        }
        let delta = (&next - &u).amax();
        u = next;
        if tol.is_some_and(|tol| delta <= tol) {
            return Ok(IterOutcome {
                u,
                iterations: t + 1,
                converged: true,
            });
        }
    }
    Ok(IterOutcome {
        u,
        iterations: t_max,
        converged: tol.is_none(),
    })
}

#[derive(Clone, Debug)]
pub struct QproxSolve {
    pub outcome: IterOutcome,
    /// Stepsize used; `1.0` means the undamped recurrent update.
    pub gamma: f64,
    pub damped: bool,
}

/// Recurrent prox with the convergence guard: the undamped update when
/// `γ = 1` satisfies the stepsize bound for `Θ = diag(Q)`, otherwise
/// forward-backward with `γ = 0.95 · bound`.
pub fn qprox_solve(
    q: &RealMatrix,
    z: &RealMatrix,
    lambda: f64,
    beta: f64,
    t_max: usize,
    tol: f64,
) -> Result<QproxSolve> {
    check_spd_diag(q)?;
    let bound = stepsize_bound(q, &q.diagonal());
    if 1.0 < bound {
        let p = build_reparams(q, lambda, beta, t_max)?;
        return Ok(QproxSolve {
            outcome: qprox_iterate(z, &p, Some(tol))?,
            gamma: 1.0,
            damped: false,
        });
    }
    let gamma = 0.95 * bound;
    log::warn!("stepsize bound {bound:.4} ≤ 1 for this Q; damping to γ = {gamma:.4}");
    let pp = PrecondParams::diagonal(q, gamma)?;
    Ok(QproxSolve {
        outcome: fb_precond_iterate(z, q, lambda, beta, &pp, t_max, Some(tol))?,
        gamma,
        damped: true,
    })
}
