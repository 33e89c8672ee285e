//! Versioned JSON checkpoints holding the network configuration, parameters,
//! adapters, mask, optimizer state, diffusion schedule and free-form training
//! metadata. Loads reject schema or configuration mismatches explicitly.

use super::{AdamState, FinetuneMask, GnnConfig, GnnParams, LoraAdapters, ParamLayout, PolicySnapshot};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointAdapters {
    pub rank: usize,
    pub scaling: f64,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: GnnConfig,
    pub mask: FinetuneMask,
    pub params: Vec<f64>,
    pub bn_running: Vec<f64>,
    pub adapters: Option<CheckpointAdapters>,
    pub optimizer: Option<AdamState>,
    pub policy_version: u64,
    pub schedule: DiffusionSchedule,
    /// Free-form experiment metadata (train config, dataset hash, epoch, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_policy(
        policy: &PolicySnapshot,
        optimizer: Option<&AdamState>,
        schedule: &DiffusionSchedule,
        meta: serde_json::Value,
    ) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: policy.params.config().clone(),
            mask: policy.mask.clone(),
            params: policy.params.data.clone(),
            bn_running: policy.params.bn_running.clone(),
            adapters: policy.adapters.as_ref().map(|a| CheckpointAdapters {
                rank: a.rank,
                scaling: a.scaling,
                data: a.data.clone(),
            }),
            optimizer: optimizer.cloned(),
            policy_version: policy.version,
            schedule: schedule.clone(),
            meta,
        }
    }

    /// Rejects checkpoints whose configuration differs from the expected one.
    pub fn validate_config(&self, expected: &GnnConfig) -> Result<()> {
        if &self.config != expected {
            return Err(Error::Config(format!(
                "checkpoint configuration {:?} does not match expected {:?}",
                self.config, expected
            )));
        }
        Ok(())
    }

    /// Reconstructs the policy (and optimizer state) with full shape checks.
    pub fn into_policy(self) -> Result<(PolicySnapshot, Option<AdamState>, DiffusionSchedule, serde_json::Value)> {
        self.config.validate()?;
        let layout = ParamLayout::build(&self.config);
        if self.params.len() != layout.total {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, layout expects {}",
                self.params.len(),
                layout.total
            )));
        }
        if self.bn_running.len() != layout.run_total {
            return Err(Error::Config("checkpoint running-stat length mismatch".into()));
        }
        self.mask.validate(self.config.depth)?;
        let params = GnnParams {
            layout: layout.clone(),
            data: self.params,
            bn_running: self.bn_running,
        };
        let adapters = match self.adapters {
            None => None,
            Some(ck) => {
                let mut rebuilt = LoraAdapters::new(&layout, &self.mask, ck.rank, ck.scaling, 0)?;
                if rebuilt.data.len() != ck.data.len() {
                    return Err(Error::Config(format!(
                        "checkpoint adapters hold {} values, mask implies {}",
                        ck.data.len(),
                        rebuilt.data.len()
                    )));
                }
                rebuilt.data = ck.data;
                Some(rebuilt)
            }
        };
        if let Some(op) = &self.optimizer {
            if op.m_main.len() != params.data.len()
                || op.m_adapter.len() != adapters.as_ref().map_or(0, |a| a.data.len())
            {
                return Err(Error::Config("checkpoint optimizer state shape mismatch".into()));
            }
        }
        Ok((
            PolicySnapshot {
                params,
                adapters,
                mask: self.mask,
                version: self.policy_version,
            },
            self.optimizer,
            self.schedule,
            self.meta,
        ))
    }
}

/// Atomic JSON write.
pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let body = serde_json::to_vec(checkpoint).map_err(|e| Error::Config(e.to_string()))?;
    crate::instances::dataset_atomic_write(path.as_ref(), &body)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: ck.schema_version,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::BetaSpec;
    use crate::instances::ProblemKind;

    fn setup() -> (PolicySnapshot, DiffusionSchedule) {
        let cfg = GnnConfig::new(ProblemKind::Tsp, 2, 6).unwrap();
        let policy = PolicySnapshot::new(&cfg, 3)
            .unwrap()
            .into_hybrid(2, 1.0, 1, 4)
            .unwrap();
        let sched = DiffusionSchedule::new(10, BetaSpec::default_linear()).unwrap();
        (policy, sched)
    }

    #[test]
    fn checkpoint_roundtrip_preserves_policy_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let (policy, sched) = setup();
        let adam = AdamState::new(&policy);
        let ck = Checkpoint::from_policy(&policy, Some(&adam), &sched, serde_json::json!({"epoch": 3}));
        save_checkpoint(&path, &ck).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ck);
        let (policy2, adam2, sched2, meta) = loaded.into_policy().unwrap();
        assert_eq!(policy2.params.data, policy.params.data);
        assert_eq!(policy2.adapters.as_ref().unwrap().data, policy.adapters.as_ref().unwrap().data);
        assert_eq!(adam2.unwrap(), adam);
        assert_eq!(sched2, sched);
        assert_eq!(meta["epoch"], 3);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let (policy, sched) = setup();
        let ck = Checkpoint::from_policy(&policy, None, &sched, serde_json::Value::Null);
        save_checkpoint(&path, &ck).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let (policy, sched) = setup();
        let ck = Checkpoint::from_policy(&policy, None, &sched, serde_json::Value::Null);
        let other = GnnConfig::new(ProblemKind::Tsp, 3, 6).unwrap();
        assert!(ck.validate_config(&other).is_err());
        assert!(ck.validate_config(policy.params.config()).is_ok());
    }

    #[test]
    fn schema_bump_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let (policy, sched) = setup();
        let mut ck = Checkpoint::from_policy(&policy, None, &sched, serde_json::Value::Null);
        ck.schema_version = 99;
        save_checkpoint(&path, &ck).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::SchemaVersion { found: 99, .. })
        ));
    }
}
