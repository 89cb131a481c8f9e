//! Run configuration: one TOML document for every command.
//!
//! Missing sections and keys take the desk-scale defaults below; unknown keys
//! are rejected. Each command writes the resolved document beside its outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, Split};
use crate::error::{Error, Result};
use crate::flow_path::PathConfig;
use crate::network::NetworkConfig;
use crate::training::{CurriculumSchedule, TrainConfig};

pub const RESOLVED_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub path: PathConfig,
    pub corpus: CorpusConfig,
    /// `bins = 0` takes the bin count of the corpus STFT.
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub curriculum: CurriculumSchedule,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            path: PathConfig::default(),
            corpus: CorpusConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig {
                lr_scratch: 1e-3,
                steps: 1500,
                crop_frames: 32,
                val_every: 250,
                ..TrainConfig::default()
            },
            curriculum: CurriculumSchedule {
                steps_per_stage: 100,
                ..CurriculumSchedule::default()
            },
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub nfe: Vec<usize>,
    pub splits: Vec<Split>,
    /// Sampler seed; utterance `i` uses `seed ^ i`.
    pub seed: u64,
    pub thresholds: Thresholds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nfe: vec![1, 2, 5],
            splits: vec![Split::Test, Split::Ood],
            seed: 0,
            thresholds: Thresholds::default(),
        }
    }
}

/// Gates checked by `eval` when both a flow and a mean-flow checkpoint are
/// given. A non-finite bound (`-inf`, `inf`) disables its gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Minimum SI-SDR margin of mean-flow over flow at NFE 1 on the test split.
    pub min_gain_nfe1_db: f64,
    /// Maximum SI-SDR gap between mean-flow at NFE 1 and NFE 5 on the test split.
    pub max_nfe1_vs_nfe5_db: f64,
    /// Mean-flow must beat flow on the ood split at every evaluated NFE.
    pub ood_wins_every_nfe: bool,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            min_gain_nfe1_db: 1.0,
            max_nfe1_vs_nfe5_db: 2.0,
            ood_wins_every_nfe: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub ratios: Vec<f64>,
    pub split: Split,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.0, 0.25, 0.5, 0.75],
            split: Split::Test,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fills derived fields and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        let bins = self.corpus.stft.bins();
        if self.network.bins == 0 {
            self.network.bins = bins;
        } else if self.network.bins != bins {
            return Err(Error::Config(format!(
                "network.bins = {} but the corpus STFT has {bins} bins",
                self.network.bins
            )));
        }
        PathConfig::new(self.path.sigma, self.path.t_floor)?;
        self.corpus.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.curriculum.validate()?;
        if self.eval.nfe.is_empty() || self.eval.nfe.contains(&0) {
            return Err(Error::Config("eval.nfe must list positive step counts".into()));
        }
        if self.eval.splits.is_empty() {
            return Err(Error::Config("eval.splits must not be empty".into()));
        }
        let t = &self.eval.thresholds;
        if t.min_gain_nfe1_db.is_nan() || t.max_nfe1_vs_nfe5_db.is_nan() {
            return Err(Error::Config("eval.thresholds bounds must not be nan".into()));
        }
        if self.ablation.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(format!(
                "ablation ratios must lie in [0, 1]: {:?}",
                self.ablation.ratios
            )));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Writes the resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let text = format!(
            "# resolved by meanse {}\n{}",
            env!("CARGO_PKG_VERSION"),
            self.to_toml()
        );
        fs::write(&path, text).map_err(Error::io(&path))
    }
}
