//! Datasets, augmentation, robustness sweeps, run configuration and the
//! verification suites behind the `detrame` command-line tool.

pub mod augment;
pub mod config;
pub mod data;
pub mod noise;
pub mod run;
pub mod verify;

pub use config::RunConfig;
pub use data::{load_cifar10, make_synthetic, Dataset, Split, SyntheticOptions};
