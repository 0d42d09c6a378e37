//! TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::Context;
use fairflow::datagen::GeneratorConfig;
use fairflow::encoder::EncoderConfig;
use fairflow::perturb::PerturbationSpec;
use fairflow::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// A usage or config problem found by the CLI itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairwiseConfig {
    /// Explicit operators (default: the explicit ones in `train.branches`).
    pub explicit: Vec<PerturbationSpec>,
    /// Implicit operators (default: the implicit ones in `train.branches`).
    pub implicit: Vec<PerturbationSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub precision: Precision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub pairwise: PairwiseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            precision: Precision::F64,
            data: None,
            out: None,
            generator: GeneratorConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            pairwise: PairwiseConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        if !path.exists() {
            return Err(UsageError(format!("config {} does not exist", path.display())).into());
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let rc: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(rc)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Applies a seed override to data generation and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.generator.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(UsageError(format!("run name `{}` must be a plain directory name", self.name)).into());
        }
        self.generator.validate()?;
        self.encoder.validate()?;
        if self.encoder.n_classes != self.generator.n_classes() {
            return Err(UsageError(format!(
                "encoder.n_classes {} does not match the generator's {} classes",
                self.encoder.n_classes,
                self.generator.n_classes()
            ))
            .into());
        }
        if self.encoder.vocab_size < self.generator.vocab_size {
            return Err(UsageError(format!(
                "encoder.vocab_size {} is smaller than generator.vocab_size {}",
                self.encoder.vocab_size, self.generator.vocab_size
            ))
            .into());
        }
        self.train.validate(&self.encoder)?;
        for p in self.pairwise.explicit.iter().chain(&self.pairwise.implicit) {
            p.validate(self.encoder.n_layers)?;
        }
        Ok(())
    }

    pub fn pairwise_ops(&self) -> (Vec<PerturbationSpec>, Vec<PerturbationSpec>) {
        let pick = |given: &[PerturbationSpec], explicit: bool| {
            if given.is_empty() {
                self.train.branches.iter().filter(|b| b.kind.is_explicit() == explicit).cloned().collect()
            } else {
                given.to_vec()
            }
        };
        (pick(&self.pairwise.explicit, true), pick(&self.pairwise.implicit, false))
    }
}
