//! Flat key-value run configuration (TOML), mirrored one-to-one by CLI flags.
//!
//! Every key is optional; unset keys keep the desk-scale defaults. Unknown
//! keys are rejected.
//!
//! | key | meaning |
//! |---|---|
//! | `scales` | coarser pyramid levels during training |
//! | `edge_weight` | edge-aware smoothness factor `e` |
//! | `lambda_smooth`, `lambda_warp` | loss weights |
//! | `lr_main`, `lr_fldr`, `lr_temp` | learning rates |
//! | `epochs`, `batch`, `patch` | schedule and sample geometry |
//! | `decay_factor`, `decay_start`, `decay_every` | step decay of the learning rates |
//! | `beta1`, `beta2`, `adam_eps` | optimizer moments |
//! | `calibration_epochs` | temperature calibration length |
//! | `d`, `k` | block size and retained directions |
//! | `freeze_fldr` | keep the projection basis fixed |
//! | `seed` | RNG seed |

use std::path::Path;

use fldr_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{FldrError, Result};

macro_rules! run_config {
    ($($key:ident: $ty:ty),* $(,)?) => {
        #[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, clap::Args)]
        #[serde(deny_unknown_fields)]
        pub struct RunConfig {
            $(
                #[arg(long)]
                #[serde(skip_serializing_if = "Option::is_none")]
                pub $key: Option<$ty>,
            )*
        }

        impl RunConfig {
            /// Values set in `other` take precedence.
            pub fn overlay(&self, other: &RunConfig) -> RunConfig {
                RunConfig { $($key: other.$key.clone().or_else(|| self.$key.clone()),)* }
            }

            /// Writes the set keys into `cfg`.
            pub fn apply(&self, cfg: &mut TrainConfig) {
                $(if let Some(v) = &self.$key { cfg.$key = v.clone(); })*
            }

            /// Every key set from `cfg`.
            pub fn from_train(cfg: &TrainConfig) -> RunConfig {
                RunConfig { $($key: Some(cfg.$key.clone()),)* }
            }
        }
    };
}

run_config! {
    scales: usize,
    edge_weight: f64,
    lambda_smooth: f64,
    lambda_warp: f64,
    lr_main: f64,
    lr_fldr: f64,
    lr_temp: f64,
    epochs: usize,
    batch: usize,
    patch: usize,
    decay_factor: f64,
    decay_start: usize,
    decay_every: usize,
    beta1: f64,
    beta2: f64,
    adam_eps: f64,
    calibration_epochs: usize,
    d: usize,
    k: usize,
    freeze_fldr: bool,
    seed: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| FldrError::io(path, e))?;
        Self::parse(&text).map_err(|e| FldrError::ConfigFile { path: path.to_path_buf(), msg: e.message().to_string() })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }

    /// Desk defaults with this config applied.
    pub fn resolve(&self) -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        self.apply(&mut cfg);
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_overlay() {
        let cfg = TrainConfig { epochs: 7, lr_main: 3e-4, freeze_fldr: true, ..TrainConfig::desk() };
        let text = RunConfig::from_train(&cfg).to_toml();
        assert_eq!(RunConfig::parse(&text).unwrap().resolve(), cfg);
        let file = RunConfig::parse("epochs = 5\nbatch = 4\n").unwrap();
        let flags = RunConfig { epochs: Some(9), ..Default::default() };
        let merged = file.overlay(&flags).resolve();
        assert_eq!((merged.epochs, merged.batch), (9, 4));
        assert!(RunConfig::parse("epoch = 5").is_err());
    }
}
