//! Experiment configuration: one versioned JSON document describing the
//! task, schedule, network, every training phase, sampling and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::EvalProtocol;
use crate::guidance::{GuidanceConfig, Integrator};
use crate::models::{Architecture, FieldMode};
use crate::preference_data::{RegimeConfig, TaskConfig};
use crate::processes::ScheduleConfig;
use crate::training::{Phase, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    SmallClean,
    LargeNoisy,
}

impl Regime {
    pub const ALL: [Regime; 2] = [Regime::SmallClean, Regime::LargeNoisy];

    pub fn name(self) -> &'static str {
        match self {
            Regime::SmallClean => "small_clean",
            Regime::LargeNoisy => "large_noisy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "small_clean" => Ok(Regime::SmallClean),
            "large_noisy" => Ok(Regime::LargeNoisy),
            other => Err(Error::Config {
                path: "regime".into(),
                message: format!("unknown regime `{other}` (expected small_clean or large_noisy)"),
            }),
        }
    }

    fn stream(self) -> u64 {
        match self {
            Regime::SmallClean => 101,
            Regime::LargeNoisy => 102,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub small_clean: RegimeConfig,
    pub large_noisy: RegimeConfig,
    /// Regime used by finetuning, sampling and the main evaluation.
    pub regime: Regime,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            small_clean: RegimeConfig::small_clean(),
            large_noisy: RegimeConfig::large_noisy(),
            regime: Regime::SmallClean,
        }
    }
}

impl DataConfig {
    pub fn regime_config(&self, r: Regime) -> &RegimeConfig {
        match r {
            Regime::SmallClean => &self.small_clean,
            Regime::LargeNoisy => &self.large_noisy,
        }
    }
}

/// Per-phase training settings. Each `seed` is a stream id mixed with the
/// experiment's global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPhases {
    pub pretrain: TrainConfig,
    pub chats: TrainConfig,
    pub dpo: TrainConfig,
    pub standard: TrainConfig,
}

impl Default for TrainPhases {
    fn default() -> Self {
        Self {
            pretrain: TrainConfig::pretrain(1),
            chats: TrainConfig {
                t_scale: 1.0,
                cond_dropout: 0.1,
                ..TrainConfig::finetune(Phase::FinetuneChats, 2)
            },
            dpo: TrainConfig {
                t_scale: 10.0,
                ..TrainConfig::finetune(Phase::FinetuneDpo, 3)
            },
            standard: TrainConfig::finetune(Phase::FinetuneStandard, 4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub task: TaskConfig,
    pub schedule: ScheduleConfig,
    pub architecture: Architecture,
    pub train: TrainPhases,
    pub data: DataConfig,
    pub guidance: GuidanceConfig,
    /// Guidance scale for the single-model CFG baselines.
    pub baseline_s: f64,
    pub eval: EvalProtocol,
    pub sweep_alphas: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = TaskConfig::default();
        let mut architecture = Architecture::mlp(2, 8, task.num_conditions, vec![64, 64, 64]);
        architecture.time_frequencies = 6;
        Self {
            schema_version: SCHEMA_VERSION,
            name: "default".into(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            task,
            schedule: ScheduleConfig::default(),
            architecture,
            train: TrainPhases::default(),
            data: DataConfig::default(),
            guidance: GuidanceConfig {
                integrator: Integrator::Ancestral,
                clip_x0: Some(5.0),
                ..GuidanceConfig::default()
            },
            baseline_s: 5.0,
            eval: EvalProtocol::default(),
            sweep_alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses and validates; JSON errors carry the offending line.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config {
            path: origin.to_string(),
            message: format!("{e}"),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        let task = self.task.build()?;
        let sched = self.schedule.build()?;
        self.architecture
            .validate()
            .map_err(|e| config_err("architecture", e.to_string()))?;
        if self.architecture.num_conditions != task.num_conditions() {
            return Err(config_err(
                "architecture.num_conditions",
                format!("{} but the task has {}", self.architecture.num_conditions, task.num_conditions()),
            ));
        }
        if self.architecture.data_dim != task.data_dim {
            return Err(config_err(
                "architecture.data_dim",
                format!("{} but the task has dimension {}", self.architecture.data_dim, task.data_dim),
            ));
        }
        for (name, cfg, phase) in [
            ("pretrain", &self.train.pretrain, Phase::Pretrain),
            ("chats", &self.train.chats, Phase::FinetuneChats),
            ("dpo", &self.train.dpo, Phase::FinetuneDpo),
            ("standard", &self.train.standard, Phase::FinetuneStandard),
        ] {
            if cfg.phase != phase {
                return Err(config_err(
                    &format!("train.{name}.phase"),
                    format!("must be `{}`", phase.name()),
                ));
            }
            cfg.validate().map_err(|e| match e {
                Error::Config { path, message } => config_err(&path.replacen("train.", &format!("train.{name}."), 1), message),
                other => other,
            })?;
        }
        self.guidance.validate(&sched)?;
        if !(self.baseline_s >= 0.0 && self.baseline_s.is_finite()) {
            return Err(config_err("baseline_s", "must be finite and >= 0"));
        }
        self.eval.validate(&task)?;
        if self.sweep_alphas.iter().any(|a| !a.is_finite()) {
            return Err(config_err("sweep_alphas", "values must be finite"));
        }
        for r in Regime::ALL {
            if self.data.regime_config(r).n_pairs == 0 {
                return Err(config_err(&format!("data.{}.n_pairs", r.name()), "must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> FieldMode {
        FieldMode::for_kind(self.schedule.kind)
    }

    /// Effective seed of a training phase or data stream.
    pub fn stream_seed(&self, stream: u64) -> u64 {
        crate::preference_data::record_seed(self.seed, stream)
    }

    pub fn data_seed(&self, r: Regime) -> u64 {
        self.stream_seed(r.stream())
    }

    pub fn phase_config(&self, cfg: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: self.stream_seed(cfg.seed),
            ..cfg.clone()
        }
    }
}

/// First 12 hex digits of SHA-256 over the canonical JSON of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("hashable value serializes");
    hex::encode(&Sha256::digest(&bytes)[..6])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_json(&c.to_json(), "mem").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::default().to_json()).unwrap();
        v["guidance"]["scale"] = serde_json::json!(3.0);
        let err = ExperimentConfig::from_json(&v.to_string(), "c.json").unwrap_err();
        assert!(err.to_string().contains("scale"), "{err}");
    }

    #[test]
    fn cross_field_errors_name_the_path() {
        let mut c = ExperimentConfig::default();
        c.guidance.steps = 5000;
        assert!(c.validate().unwrap_err().to_string().contains("guidance.steps"));
        let mut c = ExperimentConfig::default();
        c.train.dpo.phase = Phase::FinetuneChats;
        assert!(c.validate().unwrap_err().to_string().contains("train.dpo.phase"));
        let mut c = ExperimentConfig::default();
        c.train.chats.lr = -1.0;
        assert!(c.validate().unwrap_err().to_string().contains("train.chats.lr"));
        let mut c = ExperimentConfig::default();
        c.architecture.num_conditions = 3;
        assert!(c.validate().unwrap_err().to_string().contains("architecture.num_conditions"));
        let mut c = ExperimentConfig::default();
        c.schema_version = 9;
        assert!(c.validate().unwrap_err().to_string().contains("schema_version"));
    }

    #[test]
    fn hashes_distinguish_configs() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 12);
    }
}
