//! Random-noise robustness: fooling rate of additive Gaussian noise whose
//! expected energy is a fixed fraction `ρ` of each image's energy.

use anyhow::{ensure, Result};
use detrame_core::network::Network;
use detrame_core::train::predict_labels;
use detrame_core::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepResult {
    pub rho: Vec<f64>,
    /// Fraction of images whose predicted label changes, averaged over seeds.
    pub fooling_rate: Vec<f64>,
    pub seeds: Vec<u64>,
    pub images: usize,
}

/// Zero-mean Gaussian noise with per-entry std `sqrt(ρ)·‖x‖₂/sqrt(dim)`, so
/// that `E‖v‖₂² = ρ‖x‖₂²`.
pub fn draw_noise(x: &[f64], rho: f64, rng: &mut Rng) -> Vec<f64> {
    let energy: f64 = x.iter().map(|v| v * v).sum();
    let std = (rho * energy / x.len() as f64).sqrt();
    (0..x.len()).map(|_| rng.normal(0.0, std)).collect()
}

/// `x + v` for every image, with `v` from [`draw_noise`].
pub fn perturb(images: &Tensor, rho: f64, rng: &mut Rng) -> Tensor {
    let mut out = images.clone();
    for i in 0..images.batch() {
        let v = draw_noise(images.item(i), rho, rng);
        out.item_mut(i).iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    out
}

/// Mean of `‖v‖₂² / ‖x‖₂²` over the batch (images with zero energy skipped).
pub fn energy_ratio(images: &Tensor, rho: f64, rng: &mut Rng) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..images.batch() {
        let x = images.item(i);
        let e: f64 = x.iter().map(|v| v * v).sum();
        if e > 0.0 {
            let v = draw_noise(x, rho, rng);
            sum += v.iter().map(|a| a * a).sum::<f64>() / e;
            count += 1;
        }
    }
    sum / count.max(1) as f64
}

fn predict_all(net: &Network, data: &Dataset, images: &Tensor, batch: usize) -> Result<Vec<usize>> {
    let n = images.batch();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(batch) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let mut x = images.gather(&idx)?;
        data.normalize(&mut x);
        out.extend(predict_labels(net, &x)?);
    }
    Ok(out)
}

/// Fooling rate for every `ρ`, measured against the network's own clean
/// predictions and averaged over `seeds`. Noise is added to the raw `[0, 1]`
/// images, before the dataset's normalization.
pub fn noise_sweep(net: &Network, data: &Dataset, rhos: &[f64], seeds: &[u64], batch: usize) -> Result<NoiseSweepResult> {
    ensure!(!seeds.is_empty() && batch > 0, "need at least one seed and a positive batch size");
    ensure!(rhos.iter().all(|r| r.is_finite() && *r >= 0.0), "ρ values must be finite and non-negative");
    let images = &data.images;
    let clean = predict_all(net, data, images, batch)?;
    let mut fooling_rate = Vec::with_capacity(rhos.len());
    for (k, &rho) in rhos.iter().enumerate() {
        let mut total = 0.0;
        for &seed in seeds {
            let noisy = perturb(images, rho, &mut Rng::new(seed).fork(k as u64));
            let pred = predict_all(net, data, &noisy, batch)?;
            let flipped = pred.iter().zip(&clean).filter(|(a, b)| a != b).count();
            total += flipped as f64 / clean.len() as f64;
        }
        fooling_rate.push(total / seeds.len() as f64);
    }
    Ok(NoiseSweepResult {
        rho: rhos.to_vec(),
        fooling_rate,
        seeds: seeds.to_vec(),
        images: clean.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rho_is_exactly_clean() {
        let x = Rng::new(1).uniform_tensor(&[3, 3, 4, 4], 0.0, 1.0);
        assert_eq!(perturb(&x, 0.0, &mut Rng::new(2)).data(), x.data());
    }

    #[test]
    fn energy_scaling() {
        let x = Rng::new(3).uniform_tensor(&[1000, 3, 8, 8], 0.0, 1.0);
        for rho in [0.01, 0.5, 4.0] {
            let r = energy_ratio(&x, rho, &mut Rng::new(4));
            assert!((r / rho - 1.0).abs() < 0.01, "{rho}: {r}");
        }
    }
}
