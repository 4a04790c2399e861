//! Oracle suites behind `detrame verify`: dictionary/transform equivalence,
//! Q-metric prox solvers, and gradient checks.

use std::fmt::Write as _;
use std::time::Instant;

use anyhow::{bail, Result};
use detrame_core::dict::{theorem1_check, DictionaryFactor};
use detrame_core::gradcheck::{
    check_conv2d, check_network, check_qrelu, check_simple_layers, check_transform_conv, check_transform_dense,
    GradCheck,
};
use detrame_core::network::{LayerSpec, Network, NetworkSpec};
use detrame_core::qmetric::{
    build_reparams, fb_precond_iterate, fb_reparams, fixed_point_residual, q_norm, qprox_iterate, qprox_oracle,
    stepsize_bound, PrecondParams,
};
use detrame_core::tensor::{RealMatrix, RealVector};
use detrame_core::train::init_params;
use detrame_core::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    /// Measured quantity (an error, a ratio, or a count of failures).
    pub value: f64,
    pub tol: f64,
    pub passed: bool,
    pub seconds: f64,
}

impl CheckResult {
    fn new(suite: &'static str, name: impl Into<String>, value: f64, tol: f64, start: Instant) -> Self {
        CheckResult {
            suite,
            name: name.into(),
            value,
            tol,
            passed: value <= tol,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> RealMatrix {
    RealMatrix::from_fn(r, c, |_, _| rng.normal(0.0, 1.0))
}

/// `Q = DᵀD + αI` for a random `m × k` dictionary.
fn random_metric(rng: &mut Rng, m: usize, k: usize, alpha: f64) -> RealMatrix {
    let d = random_matrix(rng, m, k) / (m as f64).sqrt();
    d.transpose() * &d + RealMatrix::identity(k, k) * alpha
}

/// `M_D(x)` computed directly vs. the prox of the transformed input, over
/// `instances` random dictionaries (`m ≤ 8`, `k ≤ 12`, `α ≥ 0.1`), half with
/// a non-zero linear term.
pub fn dict_equivalence(instances: usize, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let (m, k) = (1 + rng.below(8), 1 + rng.below(12));
        let alpha = rng.uniform(0.1, 2.0);
        let d = random_matrix(&mut rng, m, k);
        let shift = RealVector::from_fn(k, |_, _| if i % 2 == 0 { rng.normal(0.0, 0.5) } else { 0.0 });
        let f = DictionaryFactor::new(d, alpha, rng.uniform(0.01, 1.0), rng.uniform(0.0, 0.5), shift)?;
        let x = RealVector::from_fn(m, |_, _| rng.normal(0.0, 1.0));
        worst = worst.max(theorem1_check(&f, &x, 1e-6)?.max_abs_diff);
    }
    Ok(CheckResult::new(
        "dict-equiv",
        format!("M_D vs prox of transform, {instances} instances"),
        worst,
        1e-6,
        start,
    ))
}

/// Random metrics for which the undamped recurrence satisfies the stepsize bound.
fn admissible_metric(rng: &mut Rng) -> Result<RealMatrix> {
    for _ in 0..10_000 {
        let k = 1 + rng.below(10);
        let m = k + rng.below(12);
        let alpha = rng.uniform(0.1, 1.0);
        let q = random_metric(rng, m, k, alpha);
        if stepsize_bound(&q, &q.diagonal()) > 1.05 {
            return Ok(q);
        }
    }
    bail!("no admissible metric found")
}

/// Recurrent, preconditioned forward-backward and oracle prox agree, and each
/// satisfies the coordinate-wise fixed-point conditions.
pub fn prox_agreement(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let start = Instant::now();
    let mut rng = Rng::new(seed);
    let (mut agree, mut resid) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let q = admissible_metric(&mut rng)?;
        let k = q.nrows();
        let (lambda, beta) = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 0.5));
        let n = 1 + rng.below(4);
        let z = random_matrix(&mut rng, k, n);
        let oracle = qprox_oracle(&q, &z, lambda, beta)?;
        let rec = qprox_iterate(&z, &build_reparams(&q, lambda, beta, 1_000_000)?, Some(1e-13))?;
        let pp = PrecondParams::diagonal(&q, 1.0)?;
        let fb = fb_precond_iterate(&z, &q, lambda, beta, &pp, 1_000_000, Some(1e-13))?;
        for u in [&rec.u, &fb.u] {
            agree = agree.max((u - &oracle).amax());
        }
        for u in [&oracle, &rec.u, &fb.u] {
            resid = resid.max(fixed_point_residual(u, &q, &z, lambda, beta));
        }
    }
    Ok(vec![
        CheckResult::new("qmetric-prox", format!("solver agreement, {instances} instances"), agree, 1e-6, start),
        CheckResult::new("qmetric-prox", "fixed-point residual", resid, 1e-6, start),
    ])
}

/// Forward-backward parameters at `γ = 1`, `Θ = diag(Q)` against the direct
/// reparameterization. Non-zero diagonal entries count as infinite error.
pub fn appendix_identity(instances: usize, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (k, m, alpha) = (1 + rng.below(12), 1 + rng.below(12), rng.uniform(0.1, 2.0));
        let q = random_metric(&mut rng, m, k, alpha);
        let (lambda, beta) = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0));
        let direct = build_reparams(&q, lambda, beta, 1)?;
        let fb = fb_reparams(&q, lambda, beta, &q.diagonal(), 1.0);
        worst = worst
            .max((direct.wtilde() - &fb.wtilde).amax())
            .max((direct.h() - &fb.h).amax())
            .max((direct.b() - &fb.b).amax());
        if (0..k).any(|i| fb.wtilde[(i, i)] != 0.0) {
            worst = f64::INFINITY;
        }
    }
    Ok(CheckResult::new(
        "qmetric-prox",
        format!("unit-step reparameterization identity, {instances} instances"),
        worst,
        1e-14,
        start,
    ))
}

/// Largest `‖prox(Z₁) − prox(Z₂)‖_{F,Q} / ‖Z₁ − Z₂‖_{F,Q} − 1`; must stay ≤ 1e-10.
pub fn nonexpansiveness(pairs: usize, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = Rng::new(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..pairs {
        let (k, m, alpha) = (1 + rng.below(8), 1 + rng.below(8), rng.uniform(0.1, 2.0));
        let q = random_metric(&mut rng, m, k, alpha);
        let (lambda, beta) = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 0.5));
        let n = 1 + rng.below(3);
        let z1 = random_matrix(&mut rng, k, n);
        let z2 = random_matrix(&mut rng, k, n);
        let num = q_norm(&q, &(qprox_oracle(&q, &z1, lambda, beta)? - qprox_oracle(&q, &z2, lambda, beta)?));
        let den = q_norm(&q, &(z1 - z2));
        worst = worst.max(num / den - 1.0);
    }
    Ok(CheckResult::new(
        "qmetric-prox",
        format!("nonexpansive in the Q-norm, {pairs} pairs (ratio − 1)"),
        worst,
        1e-10,
        start,
    ))
}

fn grad_result(c: GradCheck, tol: f64, start: Instant) -> CheckResult {
    CheckResult::new("gradients", c.name, c.rel_error, tol, start)
}

/// Finite-difference checks for every layer (`≤ 1e-4`; primitive operations
/// `≤ 1e-6`) and an end-to-end three-layer Q-metric stack (`≤ 1e-3`).
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for (stride, groups) in [(1, 1), (2, 1), (1, 2)] {
        let t = Instant::now();
        out.push(grad_result(check_conv2d(&mut rng, stride, groups)?, 1e-6, t));
    }
    let t = Instant::now();
    out.push(grad_result(check_transform_dense(&mut rng)?, 1e-4, t));
    let t = Instant::now();
    out.push(grad_result(check_transform_conv(&mut rng)?, 1e-4, t));
    let t = Instant::now();
    for c in check_simple_layers(&mut rng)? {
        out.push(grad_result(c, 1e-4, t));
    }
    for steps in [1, 3, 5] {
        for dense in [true, false] {
            let t = Instant::now();
            out.push(grad_result(check_qrelu(&mut rng, dense, steps)?, 1e-4, t));
        }
    }
    let t = Instant::now();
    out.push(grad_result(detrame_stack_check(&mut rng)?, 1e-3, t));
    Ok(out)
}

/// conv → q-relu three times, pooled to logits, with the metric parameters
/// moved off their initial constants.
pub fn detrame_stack_check(rng: &mut Rng) -> Result<GradCheck> {
    let spec = NetworkSpec {
        name: "three-layer stack".into(),
        classes: 3,
        input: [2, 5, 5],
        layers: vec![
            LayerSpec::Conv { filters: 3, kernel: 3, stride: 1 },
            LayerSpec::Qrelu { kernel: 3, steps: 3, groups: 1 },
            LayerSpec::Conv { filters: 3, kernel: 3, stride: 2 },
            LayerSpec::Qrelu { kernel: 3, steps: 3, groups: 1 },
            LayerSpec::Conv { filters: 3, kernel: 1, stride: 1 },
            LayerSpec::Qrelu { kernel: 1, steps: 3, groups: 1 },
            LayerSpec::Gap,
        ],
    };
    let mut net = Network::zeroed(&spec)?;
    init_params(&mut net, rng);
    for p in net.params_mut() {
        let noise = rng.normal_tensor(p.shape(), 0.0, 0.02);
        p.add_assign(&noise)?;
    }
    net.project();
    let x = rng.normal_tensor(&[2, 2, 5, 5], 0.0, 1.0);
    let seed = rng.next_u64();
    Ok(check_network("three-layer Q-metric stack, end to end", &net, &x, &[0, 2], seed)?)
}

/// Every suite at the default sizes.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = vec![dict_equivalence(100, seed)?];
    out.extend(prox_agreement(100, seed + 1)?);
    out.push(appendix_identity(100, seed + 2)?);
    out.push(nonexpansiveness(1000, seed + 3)?);
    out.extend(gradient_suite(seed + 4)?);
    Ok(out)
}

pub fn format_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        let _ = writeln!(
            s,
            "{:<4}  {:<13} {:<width$}  {:>10.3e} ≤ {:<8.1e} {:>7.2}s",
            if r.passed { "pass" } else { "FAIL" },
            r.suite,
            r.name,
            r.value,
            r.tol,
            r.seconds,
        );
    }
    s
}
