//! Plain-text run configuration: one `key = value` per line, `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use detrame_core::network::{build_plainnet_with, build_resnet, NetworkSpec, PlainNetOptions};
use detrame_core::train::{Precision, Schedule, TrainConfig};
use thiserror::Error;

use crate::data::SyntheticOptions;

#[derive(Debug, Error)]
#[error("config line {line}: {msg}")]
pub struct ConfigError {
    /// 0 when the problem is not tied to one line.
    pub line: usize,
    pub msg: String,
}

fn err(line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError { line, msg: msg.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    PlainNet,
    ResNet,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// Directory of CIFAR-10-format binaries.
    Cifar(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: Arch,
    pub depth: usize,
    pub detrame: bool,
    pub steps: usize,
    pub classes: usize,
    /// PlainNet base width.
    pub width: usize,
    /// ResNet widening factor.
    pub widen: usize,
    pub train: TrainConfig,
    pub dataset: DataSource,
    pub train_size: usize,
    pub test_size: usize,
    pub separation: f64,
    /// Seed of the synthetic generator, independent of the training seed.
    pub data_seed: u64,
    /// Standardize inputs with the training set's per-channel statistics.
    pub normalize: bool,
    pub output: Option<PathBuf>,
    /// Write 0 in the `seconds` column so reruns are byte-identical.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Arch::PlainNet,
            depth: 3,
            detrame: false,
            steps: 3,
            classes: 10,
            width: 96,
            widen: 1,
            train: TrainConfig::default(),
            dataset: DataSource::Synthetic,
            train_size: 1000,
            test_size: 200,
            separation: 1.0,
            data_seed: 0,
            normalize: true,
            output: None,
            deterministic: true,
        }
    }
}

pub const KEYS: &[&str] = &[
    "arch",
    "depth",
    "detrame",
    "T",
    "classes",
    "width",
    "widen",
    "lr0",
    "schedule",
    "momentum",
    "weight_decay",
    "batch",
    "epochs",
    "seed",
    "precision",
    "dataset",
    "augment",
    "train_size",
    "test_size",
    "separation",
    "data_seed",
    "normalize",
    "output",
    "deterministic",
];

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| err(line, format!("cannot parse `{value}` for `{key}`")))
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(err(line, format!("`{key}` must be true or false, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected `key = value`, got `{body}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(line, format!("unknown key `{key}`")));
            }
            if let Some(first) = seen.insert(key.to_string(), line) {
                return Err(err(line, format!("duplicate key `{key}` (first set on line {first})")));
            }
            match key {
                "arch" => {
                    cfg.arch = match value {
                        "plainnet" => Arch::PlainNet,
                        "resnet" => Arch::ResNet,
                        _ => return Err(err(line, format!("arch must be plainnet or resnet, got `{value}`"))),
                    }
                }
                "depth" => cfg.depth = parse(line, key, value)?,
                "detrame" => cfg.detrame = parse_bool(line, key, value)?,
                "T" => cfg.steps = parse(line, key, value)?,
                "classes" => cfg.classes = parse(line, key, value)?,
                "width" => cfg.width = parse(line, key, value)?,
                "widen" => cfg.widen = parse(line, key, value)?,
                "lr0" => cfg.train.lr0 = parse(line, key, value)?,
                "schedule" => cfg.train.schedule = Schedule::from_str(value).map_err(|e| err(line, e.to_string()))?,
                "momentum" => cfg.train.momentum = parse(line, key, value)?,
                "weight_decay" => cfg.train.weight_decay = parse(line, key, value)?,
                "batch" => cfg.train.batch = parse(line, key, value)?,
                "epochs" => cfg.train.epochs = parse(line, key, value)?,
                "seed" => cfg.train.seed = parse(line, key, value)?,
                "precision" => {
                    cfg.train.precision = Precision::from_str(value).map_err(|e| err(line, e.to_string()))?
                }
                "dataset" => {
                    cfg.dataset = match value {
                        "synthetic" => DataSource::Synthetic,
                        path => DataSource::Cifar(PathBuf::from(path.strip_prefix("cifar:").unwrap_or(path))),
                    }
                }
                "augment" => cfg.train.augment = parse_bool(line, key, value)?,
                "train_size" => cfg.train_size = parse(line, key, value)?,
                "test_size" => cfg.test_size = parse(line, key, value)?,
                "separation" => cfg.separation = parse(line, key, value)?,
                "data_seed" => cfg.data_seed = parse(line, key, value)?,
                "normalize" => cfg.normalize = parse_bool(line, key, value)?,
                "output" => cfg.output = Some(PathBuf::from(value)),
                "deterministic" => cfg.deterministic = parse_bool(line, key, value)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.validate().map_err(|mut e| {
            // Point single-key problems at the line that set the key.
            if let Some(line) = KEYS
                .iter()
                .filter(|k| e.msg.trim_start_matches("invalid argument: ").starts_with(&format!("{k} ")))
                .find_map(|k| seen.get(*k))
            {
                e.line = *line;
            }
            e
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading config {}: {e}", path.display()))?;
        Ok(RunConfig::parse(&text)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| err(0, e.to_string()))?;
        if self.classes < 2 || self.classes > 256 {
            return Err(err(0, format!("classes must lie in [2, 256], got {}", self.classes)));
        }
        if self.train.epochs == 0 {
            return Err(err(0, "epochs must be positive"));
        }
        if self.steps == 0 {
            return Err(err(0, format!("T must be at least 1, got {}", self.steps)));
        }
        if self.separation < 0.0 {
            return Err(err(0, format!("separation must be non-negative, got {}", self.separation)));
        }
        if self.dataset == DataSource::Synthetic && (self.train_size < self.classes || self.test_size == 0) {
            return Err(err(0, "synthetic data needs train_size ≥ classes and test_size ≥ 1"));
        }
        self.network_spec().map(|_| ()).map_err(|e| err(0, e.to_string()))
    }

    pub fn network_spec(&self) -> detrame_core::Result<NetworkSpec> {
        match self.arch {
            Arch::PlainNet => build_plainnet_with(
                self.depth,
                self.classes,
                self.detrame.then_some(self.steps),
                PlainNetOptions {
                    width: self.width,
                    ..PlainNetOptions::default()
                },
            ),
            Arch::ResNet => {
                if self.depth < 8 || !(self.depth - 2).is_multiple_of(6) {
                    return Err(detrame_core::Error::Spec(format!(
                        "ResNet depth must be 6n + 2, got {}",
                        self.depth
                    )));
                }
                build_resnet((self.depth - 2) / 6, self.widen, self.classes, self.detrame, self.steps)
            }
        }
    }

    pub fn synthetic_options(&self) -> SyntheticOptions {
        SyntheticOptions {
            separation: self.separation,
            ..SyntheticOptions::default()
        }
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let arch = match self.arch {
            Arch::PlainNet => "plainnet",
            Arch::ResNet => "resnet",
        };
        let dataset = match &self.dataset {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::Cifar(p) => format!("cifar:{}", p.display()),
        };
        let _ = writeln!(s, "arch = {arch}");
        let _ = writeln!(s, "depth = {}", self.depth);
        let _ = writeln!(s, "detrame = {}", self.detrame);
        let _ = writeln!(s, "T = {}", self.steps);
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "widen = {}", self.widen);
        let _ = writeln!(s, "lr0 = {}", t.lr0);
        let _ = writeln!(s, "schedule = {}", t.schedule);
        let _ = writeln!(s, "momentum = {}", t.momentum);
        let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "batch = {}", t.batch);
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "precision = f64");
        let _ = writeln!(s, "dataset = {dataset}");
        let _ = writeln!(s, "augment = {}", t.augment);
        let _ = writeln!(s, "train_size = {}", self.train_size);
        let _ = writeln!(s, "test_size = {}", self.test_size);
        let _ = writeln!(s, "separation = {}", self.separation);
        let _ = writeln!(s, "data_seed = {}", self.data_seed);
        let _ = writeln!(s, "normalize = {}", self.normalize);
        if let Some(o) = &self.output {
            let _ = writeln!(s, "output = {}", o.display());
        }
        let _ = writeln!(s, "deterministic = {}", self.deterministic);
        s
    }
}
