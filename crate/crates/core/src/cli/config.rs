//! The single JSON run configuration shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::engine::{ProtocolConfig, TrainConfig};
use crate::gp::{DgpConfig, KernelFamily, StgpConfig};
use crate::model::ModelConfig;
use crate::tasks::SamplerConfig;

pub const SEED_ENV: &str = "AUXBO_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub pool_size: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        BenchmarkSection { n_train: 200, n_val: 25, n_test: 50, pool_size: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSection {
    pub model: DgpConfig,
    /// Validation grid; `model.family` and `model.embedding_dim` are
    /// replaced by each grid cell.
    pub families: Vec<KernelFamily>,
    pub embedding_dims: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for DgpSection {
    fn default() -> Self {
        DgpSection {
            model: DgpConfig::default(),
            families: KernelFamily::ALL.to_vec(),
            embedding_dims: vec![8, 16, 32],
            train: TrainConfig { max_epochs: 1000, patience: 50, ..TrainConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub sizes: Vec<usize>,
    pub repeats: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { sizes: vec![5, 10, 20, 30], repeats: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    /// Benchmark directory used when `--data` is not given.
    pub data: Option<PathBuf>,
    pub benchmark: BenchmarkSection,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub dgp: DgpSection,
    pub stgp: StgpConfig,
    pub eval: EvalSection,
    pub protocol: ProtocolConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 1,
            data: None,
            benchmark: BenchmarkSection::default(),
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            train: TrainConfig::default(),
            dgp: DgpSection::default(),
            stgp: StgpConfig::default(),
            eval: EvalSection::default(),
            protocol: ProtocolConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Usage(format!("{}: {} at `{}`", path.display(), e.inner(), e.path())))?;
        if cfg.jobs == 0 {
            cfg.jobs = 1;
        }
        Ok(cfg)
    }

    /// Applies the seed precedence: flag, then environment, then file.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<(), CliError> {
        if let Some(s) = flag {
            self.seed = s;
        } else if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        self.train.seed = self.seed;
        self.dgp.train.seed = self.seed;
        self.stgp.seed = self.seed;
        Ok(())
    }

    /// Writes the effective configuration next to an output.
    pub fn echo(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        super::write_file(path, text.as_bytes())
    }
}
