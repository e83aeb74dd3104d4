use std::path::PathBuf;

use anyhow::Result;
use bionet::arch::{ArchConfig, Family, UpsampleMode};
use bionet::data::DataSpec;
use bionet::nas::{Phase1Config, Phase2Config};
use bionet::nn::FusionMode;
use bionet::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::exit::{Failure, CONFIG};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Architecture section; omitted fields take family defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub family: Family,
    #[serde(rename = "T", default = "three")]
    pub iterations: usize,
    #[serde(rename = "L", default = "three")]
    pub depth: usize,
    #[serde(rename = "N_mult", default = "unit")]
    pub width_mult: f64,
    #[serde(rename = "W_back")]
    pub backward_skips: Option<usize>,
    #[serde(default = "eight")]
    pub base_width: usize,
    pub fusion: Option<FusionMode>,
    pub upsample: Option<UpsampleMode>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "sixty_four")]
    pub height: usize,
    #[serde(default = "sixty_four")]
    pub width: usize,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default = "three")]
    pub classes: usize,
    #[serde(default = "noise")]
    pub noise: f64,
    #[serde(default = "train_n")]
    pub train: usize,
    #[serde(default = "val_n")]
    pub val: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults parse")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "out_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    pub arch: ArchSection,
    #[serde(default)]
    pub data: DataSection,
    pub train: Option<TrainConfig>,
    pub search: Option<SearchSection>,
}

fn three() -> usize {
    3
}
fn eight() -> usize {
    8
}
fn one() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}
fn sixty_four() -> usize {
    64
}
fn noise() -> f64 {
    0.1
}
fn train_n() -> usize {
    256
}
fn val_n() -> usize {
    64
}
fn out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Failure::new(CONFIG, format!("{origin}: {e}")).into())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::new(CONFIG, format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Sub-seeds derived from the master seed.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(t) = &mut self.train {
            t.seed = seed.wrapping_add(1);
        }
        if let Some(s) = &mut self.search {
            s.phase1.seed = seed.wrapping_add(2);
            s.phase2.seed = seed.wrapping_add(3);
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(4)
    }

    pub fn arch(&self, family: Family) -> ArchConfig {
        let a = &self.arch;
        let mut cfg = match family {
            Family::Bionet => ArchConfig::bionet(a.iterations, a.depth, a.base_width),
            Family::Bionetpp => ArchConfig::bionet_pp(a.iterations, a.depth, a.base_width),
        }
        .with_classes(self.data.channels, self.data.classes);
        cfg.width_mult = a.width_mult;
        if let Some(w) = a.backward_skips {
            cfg.backward_skips = w;
        }
        if family == a.family {
            if let Some(f) = a.fusion {
                cfg.fusion = f;
            }
            if let Some(u) = a.upsample {
                cfg.upsample = u;
            }
        }
        cfg
    }

    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            height: self.data.height,
            width: self.data.width,
            channels: self.data.channels,
            classes: self.data.classes,
            noise: self.data.noise,
            seed: self.seed,
        }
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        let fail = |e: bionet::Error| Failure::new(CONFIG, e.to_string());
        self.arch(self.arch.family).validate().map_err(fail)?;
        self.data_spec().validate().map_err(fail)?;
        let depth = 1usize << self.arch.depth;
        if !self.data.height.is_multiple_of(depth) || !self.data.width.is_multiple_of(depth) {
            return Err(Failure::new(
                CONFIG,
                format!("data extent {}x{} not divisible by 2^L = {depth}", self.data.height, self.data.width),
            )
            .into());
        }
        if self.data.train == 0 || self.data.val == 0 {
            return Err(Failure::new(CONFIG, "data.train and data.val must be positive").into());
        }
        if let Some(t) = &self.train {
            t.validate().map_err(fail)?;
        }
        if let Some(s) = &self.search {
            s.phase1.validate().map_err(fail)?;
            s.phase2.validate().map_err(fail)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
