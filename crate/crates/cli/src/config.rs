//! Experiment configuration: one TOML file, every field defaulted.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rlvr_core::analytics::SaturationConfig;
use rlvr_core::grpo::UpdateConfig;
use rlvr_core::judge::{BackendConfig, JudgeSampling, ResponseFilter};
use rlvr_core::policy::Mode;
use rlvr_core::rewards::RewardSource;
use rlvr_core::task_env::TaskFamily;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out: PathBuf,
    /// Defaults to a name derived from mode, N, reward, baseline and seed.
    pub run_id: Option<String>,
    pub task: TaskConfig,
    pub policy: PolicyConfig,
    pub update: UpdateConfig,
    pub reward: RewardConfig,
    pub data: DataConfig,
    pub judge: JudgeConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out: PathBuf::from("runs/default"),
            run_id: None,
            task: TaskConfig::default(),
            policy: PolicyConfig::default(),
            update: UpdateConfig::default(),
            reward: RewardConfig::default(),
            data: DataConfig::default(),
            judge: JudgeConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub family: TaskFamily,
    /// Candidate pool that probing and filtering draw from.
    pub pool_size: usize,
    pub heldout_size: usize,
    pub levels: u32,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            family: TaskFamily::ParityChain,
            pool_size: 4096,
            heldout_size: 256,
            levels: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub mode: Mode,
    pub max_len: usize,
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Shared,
            max_len: 8,
            init_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub source: RewardSource,
    /// Fraction of training labels to corrupt.
    pub gamma: f64,
    pub probe_samples: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            source: RewardSource::Verifier,
            gamma: 0.0,
            probe_samples: 96,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub backend: BackendConfig,
    pub sampling: JudgeSampling,
    pub filter: ResponseFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub eps_max: f64,
    pub guard: usize,
    /// Run whose curves the G_sat gap is measured against.
    pub companion: Option<String>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let s = SaturationConfig::default();
        Self {
            eps_max: s.eps_max,
            guard: s.guard,
            companion: None,
        }
    }
}

impl AnalysisConfig {
    pub fn saturation(&self) -> SaturationConfig {
        SaturationConfig {
            eps_max: self.eps_max,
            guard: self.guard,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!(
                "config {} has schema_version {}, this build reads {}",
                path.display(),
                cfg.schema_version,
                SCHEMA_VERSION
            );
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn reward_name(&self) -> &'static str {
        match self.reward.source {
            RewardSource::Verifier => "verifier",
            RewardSource::Corrupted => "corrupted",
            RewardSource::MajorityVote { .. } => "majority",
            RewardSource::SelfCertainty => "certainty",
        }
    }

    pub fn run_id(&self) -> String {
        if let Some(id) = &self.run_id {
            return id.clone();
        }
        let mode = match self.policy.mode {
            Mode::Shared => "shared",
            Mode::Tabular => "tabular",
        };
        let baseline = match self.update.baseline {
            rlvr_core::grpo::BaselineMode::GroupMean => "mean",
            rlvr_core::grpo::BaselineMode::Const0 => "pos",
            rlvr_core::grpo::BaselineMode::Const1 => "neg",
        };
        let mut id = format!("{mode}-n{}-{}-{baseline}", self.data.n, self.reward_name());
        if matches!(self.reward.source, RewardSource::Corrupted) {
            id.push_str(&format!("-g{:.2}", self.reward.gamma));
        }
        id.push_str(&format!("-s{}", self.seed));
        id
    }
}
