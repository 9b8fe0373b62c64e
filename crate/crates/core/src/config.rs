//! One document holding every stage's settings.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::evalkit::{DcfParams, ProbeConfig};
use crate::frontend::FrontendConfig;
use crate::nsnet::ModelConfig;
use crate::synthcorpus::{Condition, CorpusConfig};
use crate::trainer::{PretrainConfig, TrainConfig};

/// Floating-point width of every computation in a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub conditions: Vec<Condition>,
    pub dcf: DcfParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conditions: Condition::ALL.to_vec(),
            dcf: DcfParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub precision: Precision,
    pub corpus: CorpusConfig,
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("runs/default"),
            precision: Precision::F64,
            corpus: CorpusConfig::default(),
            frontend: FrontendConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.frontend.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        ensure!(
            self.frontend.sample_rate == self.corpus.sample_rate,
            Config,
            "frontend sample_rate {} differs from corpus sample_rate {}",
            self.frontend.sample_rate,
            self.corpus.sample_rate
        );
        ensure!(!self.eval.conditions.is_empty(), Config, "eval.conditions is empty");
        ensure!(
            !self.probe.snr_grid.is_empty() && self.probe.pairs >= 1,
            Config,
            "probe needs an SNR grid and pairs"
        );
        Ok(())
    }

    /// Applies `NS_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var("NS_SEED") {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("NS_SEED={v:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }
}

/// Architecture or batch variants of the scorer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// The frozen extractor trunk doubles as the test encoder.
    SharedEncoder,
    Layers(usize),
    /// Drops the sinusoidal term, keeping the type embedding.
    NoPe,
    /// Enrollment slots per test.
    M(usize),
}

impl Ablation {
    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Ablation::SharedEncoder => cfg.model.shared_encoder = true,
            Ablation::Layers(k) => cfg.model.layers = k,
            Ablation::NoPe => cfg.model.positional_encoding = false,
            Ablation::M(k) => cfg.train.enrollments = k,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ablation::SharedEncoder => f.write_str("shared-encoder"),
            Ablation::Layers(k) => write!(f, "layers={k}"),
            Ablation::NoPe => f.write_str("no-pe"),
            Ablation::M(k) => write!(f, "m={k}"),
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let count = |v: &str| {
            v.parse::<usize>()
                .ok()
                .filter(|&k| k >= 1)
                .ok_or_else(|| Error::Config(format!("ablation {s:?} needs a positive integer")))
        };
        match s.split_once('=') {
            None if s == "shared-encoder" => Ok(Ablation::SharedEncoder),
            None if s == "no-pe" => Ok(Ablation::NoPe),
            Some(("layers", v)) => Ok(Ablation::Layers(count(v)?)),
            Some(("m", v)) => Ok(Ablation::M(count(v)?)),
            _ => Err(Error::Config(format!(
                "unknown ablation {s:?}; expected shared-encoder, layers=K, no-pe or m=K"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[train]\nepochs = 4\navg_last_k = 2\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.enrollments, 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 3\n"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml("[model]\ndepth = 3\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ablations_parse_and_apply() {
        let mut cfg = RunConfig::default();
        for s in ["shared-encoder", "layers=8", "no-pe", "m=1"] {
            let a: Ablation = s.parse().unwrap();
            assert_eq!(a.to_string(), s);
            a.apply(&mut cfg);
        }
        assert!(cfg.model.shared_encoder && !cfg.model.positional_encoding);
        assert_eq!((cfg.model.layers, cfg.train.enrollments), (8, 1));
        assert!("layers=0".parse::<Ablation>().is_err());
        assert!("dropout".parse::<Ablation>().is_err());
    }
}
