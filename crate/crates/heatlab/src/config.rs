//! Experiment configuration: one structured JSON file per experiment with
//! explicit seeds, plus named presets wiring each standard experiment to a
//! single command invocation.

use crate::analysis::{EvalConfig, Refinement};
use crate::decoders::DecoderKind;
use crate::diffusion::{BetaSpec, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::gnn::GnnConfig;
use crate::instances::ProblemKind;
use crate::training::{RewardConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// How labels are produced by data generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LabelSpec {
    Exact,
    /// Budget-capped local search labels (TSP only).
    Suboptimal { budget: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    pub n: usize,
    /// Edge probability for Erdos-Renyi MIS instances; ignored for TSP.
    pub er_p: f64,
    pub train_count: usize,
    pub heldout_count: usize,
    pub labels: LabelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    pub train_dataset: PathBuf,
    pub heldout_dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta: BetaSpec,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.t_max, self.beta)
    }
}

/// Full experiment description; every command reads the sections it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub problem: ProblemConfig,
    pub paths: PathsConfig,
    pub schedule: ScheduleConfig,
    pub gnn: GnnConfig,
    pub train: TrainConfig,
    pub reward: RewardConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.gnn.validate()?;
        self.train.validate(self.problem.kind)?;
        if self.gnn.kind != self.problem.kind {
            return Err(Error::Config("network kind does not match problem kind".into()));
        }
        if self.problem.kind == ProblemKind::Mis {
            if !(0.0..=1.0).contains(&self.problem.er_p) {
                return Err(Error::Config("er_p must lie in [0,1]".into()));
            }
            if self.eval.decoder == DecoderKind::NearestNeighbor {
                return Err(Error::Config("nearest-neighbor decoder is invalid for MIS".into()));
            }
            if matches!(self.problem.labels, LabelSpec::Suboptimal { .. }) {
                return Err(Error::Config("suboptimal labels are defined for TSP only".into()));
            }
        }
        if self.schedule.t_max < self.train.rollout_steps {
            return Err(Error::Config("rollout steps exceed the schedule length".into()));
        }
        if self.schedule.t_max < self.eval.steps {
            return Err(Error::Config("eval steps exceed the schedule length".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::instances::dataset_atomic_write(path, self.to_json()?.as_bytes())
    }
}

/// Names of the shipped presets.
pub const PRESET_NAMES: [&str; 5] = [
    "tsp10-sl",
    "tsp20-cado-sr",
    "tsp20-cado-lcr",
    "mis-er-small",
    "tsp20-suboptimal-labels",
];

/// Builds a named preset. Paths are rooted under `root`.
pub fn preset(name: &str, root: &Path, seed: u64) -> Result<ExperimentConfig> {
    let out_dir = root.join(name);
    let train_dataset = out_dir.join("train.jsonl");
    let heldout_dataset = Some(out_dir.join("heldout.jsonl"));
    let schedule = ScheduleConfig {
        t_max: 50,
        beta: BetaSpec::default_linear(),
    };
    let eval = EvalConfig {
        decoder: DecoderKind::Greedy,
        refinement: Refinement::None,
        steps: 5,
        seed,
    };
    let cfg = match name {
        "tsp10-sl" => {
            let gnn = GnnConfig::new(ProblemKind::Tsp, 4, 32)?;
            let mut train = TrainConfig::sl_default(seed);
            train.epochs = 12;
            train.batch_size = 32;
            ExperimentConfig {
                name: name.into(),
                seed,
                problem: ProblemConfig {
                    kind: ProblemKind::Tsp,
                    n: 10,
                    er_p: 0.0,
                    train_count: 2000,
                    heldout_count: 500,
                    labels: LabelSpec::Exact,
                },
                paths: PathsConfig {
                    train_dataset,
                    heldout_dataset,
                    out_dir,
                },
                schedule,
                gnn,
                train,
                reward: RewardConfig::lcr(),
                eval,
            }
        }
        "tsp20-cado-sr" | "tsp20-cado-lcr" => {
            let gnn = GnnConfig::new(ProblemKind::Tsp, 4, 32)?;
            let mut train = TrainConfig::rl_default(seed);
            train.epochs = 10;
            train.samples_per_epoch = 256;
            train.batch_size = 32;
            train.learning_rate = 4e-4;
            train.rollout_steps = 5;
            ExperimentConfig {
                name: name.into(),
                seed,
                problem: ProblemConfig {
                    kind: ProblemKind::Tsp,
                    n: 20,
                    er_p: 0.0,
                    train_count: 2000,
                    heldout_count: 500,
                    labels: LabelSpec::Exact,
                },
                paths: PathsConfig {
                    train_dataset,
                    heldout_dataset,
                    out_dir,
                },
                schedule,
                gnn,
                train,
                reward: if name == "tsp20-cado-sr" {
                    RewardConfig::sr()
                } else {
                    RewardConfig::lcr()
                },
                eval,
            }
        }
        "mis-er-small" => {
            let gnn = GnnConfig::new(ProblemKind::Mis, 4, 32)?;
            let mut train = TrainConfig::sl_default(seed);
            train.epochs = 8;
            train.batch_size = 32;
            ExperimentConfig {
                name: name.into(),
                seed,
                problem: ProblemConfig {
                    kind: ProblemKind::Mis,
                    n: 16,
                    er_p: 0.25,
                    train_count: 1000,
                    heldout_count: 200,
                    labels: LabelSpec::Exact,
                },
                paths: PathsConfig {
                    train_dataset,
                    heldout_dataset,
                    out_dir,
                },
                schedule,
                gnn,
                train,
                reward: RewardConfig::lcr(),
                eval,
            }
        }
        "tsp20-suboptimal-labels" => {
            let gnn = GnnConfig::new(ProblemKind::Tsp, 4, 32)?;
            let mut train = TrainConfig::sl_default(seed);
            train.epochs = 12;
            train.batch_size = 32;
            ExperimentConfig {
                name: name.into(),
                seed,
                problem: ProblemConfig {
                    kind: ProblemKind::Tsp,
                    n: 20,
                    er_p: 0.0,
                    train_count: 2000,
                    heldout_count: 500,
                    labels: LabelSpec::Suboptimal { budget: 30 },
                },
                paths: PathsConfig {
                    train_dataset,
                    heldout_dataset,
                    out_dir,
                },
                schedule,
                gnn,
                train,
                reward: RewardConfig::lcr(),
                eval,
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other}; available: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_build_and_roundtrip() {
        for name in PRESET_NAMES {
            let cfg = preset(name, Path::new("/tmp/lab"), 7).unwrap();
            let text = cfg.to_json().unwrap();
            let back = ExperimentConfig::from_json(&text).unwrap();
            assert_eq!(cfg, back, "{name}");
        }
        assert!(preset("nope", Path::new("/tmp"), 0).is_err());
    }

    #[test]
    fn validation_catches_kind_mismatch() {
        let mut cfg = preset("tsp10-sl", Path::new("/tmp/lab"), 1).unwrap();
        cfg.problem.kind = ProblemKind::Mis;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn validation_catches_decoder_mismatch() {
        let mut cfg = preset("mis-er-small", Path::new("/tmp/lab"), 1).unwrap();
        cfg.eval.decoder = DecoderKind::NearestNeighbor;
        assert!(cfg.validate().is_err());
    }
}
