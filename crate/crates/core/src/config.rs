//! Experiment configuration: one TOML document describing a whole run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bootstrap::BootstrapConfig;
use crate::dataset::{SceneParams, SplitRatios, Tiling};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::io;
use crate::model::{ArchitectureSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub scenes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub scene: SceneParams,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            scenes: 64,
            height: 256,
            width: 256,
            seed: 1,
            scene: SceneParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Base seed for training and subset sampling; the corpus has its own.
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for scoring and evaluation. Results do not depend on it.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub tiling: Tiling,
    #[serde(default)]
    pub split: SplitRatios,
    #[serde(default)]
    pub model: ArchitectureSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn with_output(output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            output_dir: output_dir.into(),
            seed: 0,
            workers: None,
            corpus: CorpusConfig::default(),
            tiling: Tiling::default(),
            split: SplitRatios::default(),
            model: ArchitectureSpec::default(),
            train: TrainConfig::default(),
            bootstrap: BootstrapConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Parses TOML text. A relative `output_dir` is resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.scenes == 0 {
            return Err(Error::Config("corpus.scenes must be positive".into()));
        }
        c.scene.validate()?;
        self.tiling.validate()?;
        self.tiling.grid(c.height, c.width)?;
        self.split.validate()?;
        self.model.plan()?;
        if self.model.input_side != self.tiling.input_side || self.model.output_side != self.tiling.output_side {
            return Err(Error::Config(format!(
                "model expects {}→{} patches but tiling cuts {}→{}",
                self.model.input_side, self.model.output_side, self.tiling.input_side, self.tiling.output_side
            )));
        }
        self.train.validate()?;
        self.eval.validate()?;
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, leaving out `output_dir` and
    /// `workers` since neither changes any result.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let map = value.as_object_mut().expect("config is an object");
        map.remove("output_dir");
        map.remove("workers");
        io::sha256_hex(serde_json::to_string(&value).expect("json").as_bytes())
    }
}
