//! `train`, `eval` and `noise-sweep` runs driven by a [`RunConfig`].

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use detrame_core::network::Network;
use detrame_core::train::{
    evaluate, init_params, load_checkpoint, save_checkpoint, train_epoch, EvalMetrics, OptimizerState,
};
use detrame_core::Rng;

use crate::config::{DataSource, RunConfig};
use crate::data::{load_cifar10, make_synthetic, Dataset};
use crate::noise::{noise_sweep, NoiseSweepResult};

pub const METRICS_HEADER: [&str; 6] = ["epoch", "train_loss", "train_acc", "test_acc", "lr", "seconds"];
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EVAL_BATCH: usize = 100;

/// Training and test sets; with `normalize` both are standardized with the
/// training set's per-channel statistics.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &cfg.dataset {
        DataSource::Synthetic => {
            let all = make_synthetic(
                cfg.classes,
                cfg.train_size + cfg.test_size,
                cfg.data_seed,
                cfg.synthetic_options(),
            )?;
            all.split_at(cfg.train_size)?
        }
        DataSource::Cifar(dir) => load_cifar10(dir, cfg.classes)?,
    };
    if !cfg.normalize {
        return Ok((train, test));
    }
    let (mean, std) = (train.mean, train.std);
    Ok((train.with_normalization(mean, std)?, test.with_normalization(mean, std)?))
}

/// Network built from the config with freshly initialized parameters.
pub fn fresh_network(cfg: &RunConfig) -> Result<Network> {
    let mut net = Network::zeroed(&cfg.network_spec()?)?;
    init_params(&mut net, &mut Rng::new(cfg.train.seed).fork(u64::MAX));
    Ok(net)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Trains for `cfg.train.epochs` epochs. Each epoch appends a row to the
/// metrics CSV and overwrites the checkpoint in `out_dir`.
pub fn train_run(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<EpochRow>> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    std::fs::write(out_dir.join(CONFIG_FILE), cfg.to_text())?;
    let (train, test) = load_datasets(cfg)?;
    let mut net = fresh_network(cfg)?;
    let mut state = OptimizerState::new(&net);
    log::info!(
        "{}: {} parameters, {} train / {} test images",
        net.spec().name,
        net.param_count(),
        train.len(),
        test.len()
    );
    let mut csv = csv::Writer::from_writer(File::create(out_dir.join(METRICS_FILE))?);
    csv.write_record(METRICS_HEADER)?;
    csv.flush()?;
    let mut rows = Vec::new();
    for _ in 0..cfg.train.epochs {
        let start = Instant::now();
        let m = train_epoch(&mut net, &train, &cfg.train, &mut state)?;
        let test_m = evaluate(&net, &test, EVAL_BATCH)?;
        let seconds = if cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
        let row = EpochRow {
            epoch: m.epoch + 1,
            train_loss: m.loss,
            train_acc: m.accuracy,
            test_acc: test_m.accuracy,
            lr: m.lr,
            seconds,
        };
        csv.write_record([
            row.epoch.to_string(),
            row.train_loss.to_string(),
            row.train_acc.to_string(),
            row.test_acc.to_string(),
            row.lr.to_string(),
            format!("{:.3}", row.seconds),
        ])?;
        csv.flush()?;
        save_checkpoint(&net, &state, &out_dir.join(CHECKPOINT_FILE))?;
        log::info!(
            "epoch {}: loss {:.4} train {:.4} test {:.4} lr {}",
            row.epoch,
            row.train_loss,
            row.train_acc,
            row.test_acc,
            row.lr
        );
        rows.push(row);
    }
    Ok(rows)
}

/// The run config stored next to a checkpoint.
pub fn sibling_config(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or_else(|| Path::new(".")).join(CONFIG_FILE)
}

pub fn restore(checkpoint: &Path, config: &Path) -> Result<(RunConfig, Network)> {
    let cfg = RunConfig::load(config)?;
    let mut net = Network::zeroed(&cfg.network_spec()?)?;
    load_checkpoint(&mut net, checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok((cfg, net))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub metrics: EvalMetrics,
    pub samples: usize,
}

pub fn eval_run(checkpoint: &Path, config: &Path) -> Result<EvalReport> {
    let (cfg, net) = restore(checkpoint, config)?;
    let (_, test) = load_datasets(&cfg)?;
    Ok(EvalReport {
        metrics: evaluate(&net, &test, EVAL_BATCH)?,
        samples: test.len(),
    })
}

pub fn noise_run(checkpoint: &Path, config: &Path, rhos: &[f64], seeds: &[u64]) -> Result<NoiseSweepResult> {
    let (cfg, net) = restore(checkpoint, config)?;
    let (_, test) = load_datasets(&cfg)?;
    noise_sweep(&net, &test, rhos, seeds, EVAL_BATCH)
}
