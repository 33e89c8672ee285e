//! Supervised pre-training, the denoising-process MDP rollout, REINFORCE
//! gradient estimation with Standard and Label-Centered rewards, and the
//! hybrid RL fine-tuning loop.

use crate::decoders::{decode, DecoderKind, Heatmap};
use crate::diffusion::{
    posterior_logprob_grad, reverse_step_to, sample_heatmap, sample_terminal_noise, sl_loss,
    DiffusionSchedule, NoisyState,
};
use crate::error::{Error, Result};
use crate::gnn::{
    apply_update, backward_from_x0prob, forward, save_checkpoint, update_bn_running, AdamState,
    BnMode, Checkpoint, GnnConfig, GnnGrads, PolicySnapshot,
};
use crate::instances::{cost, Instance, LabeledDataset, ProblemKind, Solution};
use crate::rng::{derive_rng, tag, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Reward formulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardMode {
    /// Negated cost with batch-wise standardization.
    #[serde(rename = "sr")]
    Sr,
    /// Negated optimality gap against the dataset label cost.
    #[serde(rename = "lcr")]
    Lcr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub mode: RewardMode,
    /// Added to the standard deviation in SR normalization.
    pub sr_epsilon: f64,
}

impl RewardConfig {
    pub fn sr() -> Self {
        Self {
            mode: RewardMode::Sr,
            sr_epsilon: 1e-8,
        }
    }

    pub fn lcr() -> Self {
        Self {
            mode: RewardMode::Lcr,
            sr_epsilon: 1e-8,
        }
    }
}

/// Training hyperparameters shared by pre-training and fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Rollout length for the reverse-process MDP.
    pub rollout_steps: usize,
    pub decoder: DecoderKind,
    pub seed: u64,
    pub lora_rank: usize,
    pub lora_scaling: f64,
    pub selective_layers: usize,
    /// Instances from the training set used for the fixed per-epoch probe of
    /// (cost, drop, denoising loss); 0 disables the probe.
    pub probe_size: usize,
    /// Denoising steps used by the probe's heatmap inference.
    pub probe_steps: usize,
}

impl TrainConfig {
    /// Reference fine-tuning defaults: batch 64, learning rate 1e-5, ten
    /// rollout steps, rank-2 adapters, one selectively trained layer, 512
    /// samples per epoch.
    pub fn rl_default(seed: u64) -> Self {
        Self {
            epochs: 10,
            samples_per_epoch: 512,
            batch_size: 64,
            learning_rate: 1e-5,
            rollout_steps: 10,
            decoder: DecoderKind::Greedy,
            seed,
            lora_rank: 2,
            lora_scaling: 1.0,
            selective_layers: 1,
            probe_size: 64,
            probe_steps: 5,
        }
    }

    /// Supervised pre-training defaults (cosine-annealed learning rate
    /// starting at 2e-4).
    pub fn sl_default(seed: u64) -> Self {
        Self {
            epochs: 20,
            samples_per_epoch: usize::MAX,
            batch_size: 64,
            learning_rate: 2e-4,
            rollout_steps: 10,
            decoder: DecoderKind::Greedy,
            seed,
            lora_rank: 2,
            lora_scaling: 1.0,
            selective_layers: 1,
            probe_size: 64,
            probe_steps: 5,
        }
    }

    pub fn validate(&self, kind: ProblemKind) -> Result<()> {
        if self.batch_size == 0 || self.rollout_steps == 0 {
            return Err(Error::Config("batch size and rollout steps must be positive".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if kind == ProblemKind::Mis && self.decoder == DecoderKind::NearestNeighbor {
            return Err(Error::Config("nearest-neighbor decoder is invalid for MIS".into()));
        }
        Ok(())
    }
}

/// One recorded reverse transition.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub t_hi: usize,
    pub t_lo: usize,
    pub state_bits: Vec<u8>,
    pub action_bits: Vec<u8>,
    pub logprob: f64,
}

/// A full denoising rollout: states, actions and log-probabilities down to
/// the decoded terminal solution.
#[derive(Debug, Clone)]
pub struct MdpTrajectory {
    pub instance_index: usize,
    pub instance_id: String,
    pub policy_version: u64,
    pub steps: Vec<TrajectoryStep>,
    pub final_bits: Vec<u8>,
    pub solution: Solution,
    pub cost: f64,
}

/// Samples x_T ~ Bern(0.5), applies `t_train` reverse transitions along the
/// stride-uniform grid (the last one landing at t = 0), then decodes the
/// terminal bits and computes the true cost.
pub fn rollout(
    policy: &PolicySnapshot,
    instance: &Instance,
    instance_index: usize,
    t_train: usize,
    sched: &DiffusionSchedule,
    decoder: DecoderKind,
    rng: &mut Rng,
) -> Result<MdpTrajectory> {
    if t_train < 1 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    let grid = sched.time_grid(t_train)?;
    let mut state = sample_terminal_noise(instance.num_vars(), sched.t_max(), rng);
    let mut steps = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let t_lo = if k + 1 < grid.len() { grid[k + 1] } else { 0 };
        let step = reverse_step_to(policy, &state, t_lo, instance, sched, rng)?;
        steps.push(TrajectoryStep {
            t_hi: state.t,
            t_lo,
            state_bits: state.bits.clone(),
            action_bits: step.next.bits.clone(),
            logprob: step.logprob,
        });
        state = step.next;
    }
    let heatmap = Heatmap::new(
        instance.kind(),
        instance.n(),
        state.bits.iter().map(|&b| f64::from(b)).collect(),
    )?;
    let solution = decode(decoder, &heatmap, instance)?;
    let c = cost(instance, &solution)?;
    Ok(MdpTrajectory {
        instance_index,
        instance_id: instance.id().to_string(),
        policy_version: policy.version,
        steps,
        final_bits: state.bits,
        solution,
        cost: c,
    })
}

/// Turns a batch of decoded costs into rewards. SR negates, centers by the
/// batch mean and divides by the population standard deviation (plus
/// epsilon); LCR is the per-instance negated gap to the label cost.
pub fn compute_rewards(costs: &[f64], baselines: Option<&[f64]>, rcfg: &RewardConfig) -> Result<Vec<f64>> {
    match rcfg.mode {
        RewardMode::Sr => {
            if costs.len() < 2 {
                return Err(Error::Config("SR normalization needs a batch of at least 2".into()));
            }
            let neg: Vec<f64> = costs.iter().map(|c| -c).collect();
            let mean = neg.iter().sum::<f64>() / neg.len() as f64;
            let var = neg.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / neg.len() as f64;
            let denom = var.sqrt() + rcfg.sr_epsilon;
            Ok(neg.iter().map(|r| (r - mean) / denom).collect())
        }
        RewardMode::Lcr => {
            let baselines = baselines.ok_or_else(|| {
                Error::Config("label-centered reward needs a baseline cost per instance".into())
            })?;
            if baselines.len() != costs.len() {
                return Err(Error::DimensionMismatch(
                    "baseline count does not match batch size".into(),
                ));
            }
            Ok(costs.iter().zip(baselines).map(|(c, b)| -(c - b)).collect())
        }
    }
}

/// REINFORCE gradient of the minimization objective: for each trajectory the
/// recorded steps are replayed (forward recomputation is exact, so replay
/// reproduces the sampling distribution), the log-probability gradient of the
/// recorded action is scaled by the trajectory reward, summed over steps and
/// averaged over the batch. Returns the gradient for descent (the negated
/// policy-gradient ascent direction).
pub fn reinforce_gradient(
    policy: &PolicySnapshot,
    trajectories: &[MdpTrajectory],
    rewards: &[f64],
    instances: &[&Instance],
    sched: &DiffusionSchedule,
) -> Result<GnnGrads> {
    if trajectories.len() != rewards.len() || trajectories.len() != instances.len() {
        return Err(Error::DimensionMismatch(
            "trajectories, rewards and instances must align".into(),
        ));
    }
    for traj in trajectories {
        if traj.policy_version != policy.version {
            return Err(Error::Config(format!(
                "stale trajectory: generated by policy version {}, current is {} (on-policy contract)",
                traj.policy_version, policy.version
            )));
        }
    }
    let per_traj: Result<Vec<GnnGrads>> = trajectories
        .par_iter()
        .zip(rewards.par_iter())
        .zip(instances.par_iter())
        .map(|((traj, &reward), instance)| {
            let mut acc = GnnGrads::zeros(&policy.params, policy.adapters.as_ref());
            if reward == 0.0 {
                return Ok(acc);
            }
            for step in &traj.steps {
                let (x0_prob, tape) = forward(
                    &policy.params,
                    policy.adapters.as_ref(),
                    instance,
                    &step.state_bits,
                    step.t_hi,
                    crate::diffusion::SAMPLING_BN,
                )?;
                // d/dp of sum_bits log pi(action) scaled by -reward (descent).
                let mut upstream = vec![0.0; x0_prob.len()];
                for (v, slot) in upstream.iter_mut().enumerate() {
                    let (_, grad) = posterior_logprob_grad(
                        sched,
                        step.state_bits[v],
                        x0_prob[v],
                        step.t_hi,
                        step.t_lo,
                        step.action_bits[v],
                    );
                    *slot = -reward * grad;
                }
                let grads = backward_from_x0prob(
                    &policy.params,
                    policy.adapters.as_ref(),
                    &policy.mask,
                    &tape,
                    &upstream,
                )?;
                acc.add_assign(&grads);
            }
            Ok(acc)
        })
        .collect();
    let per_traj = per_traj?;
    let mut total = GnnGrads::zeros(&policy.params, policy.adapters.as_ref());
    for g in &per_traj {
        total.add_assign(g);
    }
    total.scale(1.0 / trajectories.len() as f64);
    Ok(total)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub mean_cost: f64,
    pub mean_drop: f64,
    pub sl_loss: f64,
    pub wallclock_seconds: f64,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut body = String::from("epoch,mean_cost,mean_drop,sl_loss,wallclock_seconds\n");
    for r in rows {
        body.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.mean_cost, r.mean_drop, r.sl_loss, r.wallclock_seconds
        ));
    }
    crate::instances::dataset_atomic_write(path, body.as_bytes())
}

pub fn read_log_csv(path: &Path) -> Result<Vec<LogRow>> {
    let pstr = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(pstr.clone(), e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != "epoch,mean_cost,mean_drop,sl_loss,wallclock_seconds" {
                return Err(Error::Parse {
                    path: pstr,
                    line: 1,
                    msg: format!("unexpected header: {line}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                path: pstr,
                line: lineno + 1,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("bad {what}: {e}"),
            })
        };
        rows.push(LogRow {
            epoch: fields[0].parse().map_err(|e| Error::Parse {
                path: pstr.clone(),
                line: lineno + 1,
                msg: format!("bad epoch: {e}"),
            })?,
            mean_cost: parse(fields[1], "mean_cost")?,
            mean_drop: parse(fields[2], "mean_drop")?,
            sl_loss: parse(fields[3], "sl_loss")?,
            wallclock_seconds: parse(fields[4], "wallclock_seconds")?,
        });
    }
    Ok(rows)
}

/// Fixed evaluation probe: the same instances, the same noise streams and the
/// same label-noised states every epoch, so successive rows differ only
/// through the parameters.
fn probe_metrics(
    policy: &PolicySnapshot,
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
    sched: &DiffusionSchedule,
) -> Result<(f64, f64, f64)> {
    let k = cfg.probe_size.min(dataset.len());
    if k == 0 {
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    }
    let probe_tag = tag("train-probe");
    let stats: Result<Vec<(f64, f64, f64)>> = dataset.examples[..k]
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = derive_rng(cfg.seed, &[probe_tag, i as u64]);
            let hm = sample_heatmap(policy, &ex.instance, cfg.probe_steps, sched, &mut rng)?;
            let sol = decode(cfg.decoder, &hm, &ex.instance)?;
            let c = cost(&ex.instance, &sol)?;
            let drop = drop_pct(&ex.instance, c, ex.label_cost);
            let sl = crate::analysis::heatmap_cross_entropy(&hm, &ex.label)?;
            Ok((c, drop, sl))
        })
        .collect();
    let stats = stats?;
    let kf = stats.len() as f64;
    Ok((
        stats.iter().map(|s| s.0).sum::<f64>() / kf,
        stats.iter().map(|s| s.1).sum::<f64>() / kf,
        stats.iter().map(|s| s.2).sum::<f64>() / kf,
    ))
}

/// Percentage optimality gap relative to a reference cost. TSP compares tour
/// lengths; MIS compares set sizes (positive convention).
pub fn drop_pct(instance: &Instance, cost: f64, reference_cost: f64) -> f64 {
    match instance.kind() {
        ProblemKind::Tsp => (cost - reference_cost) / reference_cost.abs() * 100.0,
        ProblemKind::Mis => {
            let size = -cost;
            let ref_size = -reference_cost;
            if ref_size == 0.0 {
                0.0
            } else {
                (ref_size - size) / ref_size * 100.0
            }
        }
    }
}

fn maybe_checkpoint(
    out_dir: Option<&Path>,
    policy: &PolicySnapshot,
    adam: Option<&AdamState>,
    sched: &DiffusionSchedule,
    epoch: usize,
    meta: &serde_json::Value,
) -> Result<Option<PathBuf>> {
    let Some(dir) = out_dir else { return Ok(None) };
    let mut meta = meta.clone();
    meta["epoch"] = serde_json::json!(epoch);
    let ck = Checkpoint::from_policy(policy, adam, sched, meta);
    let path = dir.join(format!("checkpoint_epoch_{epoch}.json"));
    save_checkpoint(&path, &ck)?;
    Ok(Some(path))
}

/// Supervised pre-training: minimizes the denoising cross-entropy over
/// shuffled minibatches with a cosine-annealed learning rate. Emits one log
/// row per epoch (probe cost/drop plus the epoch's mean training loss) and
/// checkpoints per epoch when an output directory is given. Resuming from a
/// checkpoint at epoch k continues identically to an uninterrupted run.
pub fn pretrain_sl(
    gnn_config: &GnnConfig,
    cfg: &TrainConfig,
    dataset: &LabeledDataset,
    sched: &DiffusionSchedule,
    out_dir: Option<&Path>,
    resume: Option<(PolicySnapshot, AdamState, usize)>,
    meta: serde_json::Value,
) -> Result<(PolicySnapshot, Vec<LogRow>)> {
    let kind = dataset.kind().ok_or_else(|| Error::Config("empty dataset".into()))?;
    cfg.validate(kind)?;
    if gnn_config.kind != kind {
        return Err(Error::Config("network kind does not match dataset kind".into()));
    }
    let (mut policy, mut adam, start_epoch) = match resume {
        Some((p, a, e)) => (p, a, e),
        None => {
            let p = PolicySnapshot::new(gnn_config, cfg.seed)?;
            let a = AdamState::new(&p);
            (p, a, 0)
        }
    };
    let per_epoch = cfg.samples_per_epoch.min(dataset.len());
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);
    let epoch_tag = tag("sl-epoch");
    let sample_tag = tag("sl-sample");

    let mut rows = Vec::new();
    let started = Instant::now();
    if start_epoch == 0 {
        let (mc, md, sl) = probe_metrics(&policy, dataset, cfg, sched)?;
        rows.push(LogRow {
            epoch: 0,
            mean_cost: mc,
            mean_drop: md,
            sl_loss: sl,
            wallclock_seconds: 0.0,
        });
        maybe_checkpoint(out_dir, &policy, Some(&adam), sched, 0, &meta)?;
    }

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng = derive_rng(cfg.seed, &[epoch_tag, epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        order.truncate(per_epoch);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let global_step = epoch * steps_per_epoch + batch_no;
            let lr = cfg.learning_rate * 0.5
                * (1.0 + (std::f64::consts::PI * global_step as f64 / total_steps as f64).cos());
            let results: Result<Vec<_>> = batch
                .par_iter()
                .map(|&idx| {
                    let ex = &dataset.examples[idx];
                    let mut rng = derive_rng(cfg.seed, &[sample_tag, epoch as u64, idx as u64]);
                    sl_loss(&policy, &ex.label, &ex.instance, sched, &mut rng, BnMode::Train)
                })
                .collect();
            let results = results?;
            let mut grads = GnnGrads::zeros(&policy.params, policy.adapters.as_ref());
            for out in &results {
                if !out.loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite denoising loss at epoch {epoch} (last good checkpoint retained)"
                    )));
                }
                grads.add_assign(&out.grads);
                epoch_loss += out.loss;
            }
            seen += results.len();
            grads.scale(1.0 / results.len() as f64);
            apply_update(&mut policy, &grads, &mut adam, lr)?;
            for out in &results {
                update_bn_running(&mut policy.params, &out.tape, 0.1);
            }
        }

        let (mc, md, _) = probe_metrics(&policy, dataset, cfg, sched)?;
        rows.push(LogRow {
            epoch: epoch + 1,
            mean_cost: mc,
            mean_drop: md,
            sl_loss: epoch_loss / seen.max(1) as f64,
            wallclock_seconds: started.elapsed().as_secs_f64(),
        });
        maybe_checkpoint(out_dir, &policy, Some(&adam), sched, epoch + 1, &meta)?;
    }
    Ok((policy, rows))
}

/// RL fine-tuning with the hybrid adapter mask. Per epoch: sample instances,
/// roll out the denoising MDP, convert decoded costs to rewards, apply the
/// REINFORCE update; log the fixed probe (cost, drop, denoising loss) so the
/// drop/loss divergence can be read off the rows; checkpoint per epoch.
pub fn finetune_rl(
    cfg: &TrainConfig,
    rcfg: &RewardConfig,
    pretrained: PolicySnapshot,
    dataset: &LabeledDataset,
    sched: &DiffusionSchedule,
    out_dir: Option<&Path>,
    resume: Option<(PolicySnapshot, AdamState, usize)>,
    meta: serde_json::Value,
) -> Result<(PolicySnapshot, Vec<LogRow>)> {
    let kind = dataset.kind().ok_or_else(|| Error::Config("empty dataset".into()))?;
    cfg.validate(kind)?;
    if cfg.epochs == 0 && resume.is_none() {
        return Ok((pretrained, Vec::new()));
    }
    let (mut policy, mut adam, start_epoch) = match resume {
        Some((p, a, e)) => (p, a, e),
        None => {
            let p = pretrained.into_hybrid(cfg.lora_rank, cfg.lora_scaling, cfg.selective_layers, cfg.seed)?;
            let a = AdamState::new(&p);
            (p, a, 0)
        }
    };
    let epoch_tag = tag("rl-epoch");
    let rollout_tag = tag("rl-rollout");

    let mut rows = Vec::new();
    let started = Instant::now();
    if start_epoch == 0 {
        let (mc, md, sl) = probe_metrics(&policy, dataset, cfg, sched)?;
        rows.push(LogRow {
            epoch: 0,
            mean_cost: mc,
            mean_drop: md,
            sl_loss: sl,
            wallclock_seconds: 0.0,
        });
        maybe_checkpoint(out_dir, &policy, Some(&adam), sched, 0, &meta)?;
    }

    for epoch in start_epoch..cfg.epochs {
        let mut pick_rng = derive_rng(cfg.seed, &[epoch_tag, epoch as u64]);
        let indices: Vec<usize> = (0..cfg.samples_per_epoch.max(cfg.batch_size))
            .map(|_| pick_rng.gen_range(0..dataset.len()))
            .collect();
        for (batch_no, batch) in indices.chunks(cfg.batch_size).enumerate() {
            if batch.len() < 2 && rcfg.mode == RewardMode::Sr {
                continue; // SR cannot normalize a singleton tail batch
            }
            let trajectories: Result<Vec<MdpTrajectory>> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &idx)| {
                    let ex = &dataset.examples[idx];
                    let mut rng = derive_rng(
                        cfg.seed,
                        &[rollout_tag, epoch as u64, batch_no as u64, slot as u64],
                    );
                    rollout(
                        &policy,
                        &ex.instance,
                        idx,
                        cfg.rollout_steps,
                        sched,
                        cfg.decoder,
                        &mut rng,
                    )
                })
                .collect();
            let trajectories = trajectories?;
            let costs: Vec<f64> = trajectories.iter().map(|t| t.cost).collect();
            let baselines: Vec<f64> = batch.iter().map(|&idx| dataset.examples[idx].label_cost).collect();
            let rewards = compute_rewards(&costs, Some(&baselines), rcfg)?;
            let instances: Vec<&Instance> = batch.iter().map(|&idx| &dataset.examples[idx].instance).collect();
            let grads = reinforce_gradient(&policy, &trajectories, &rewards, &instances, sched)?;
            apply_update(&mut policy, &grads, &mut adam, cfg.learning_rate)?;
        }

        let (mc, md, sl) = probe_metrics(&policy, dataset, cfg, sched)?;
        rows.push(LogRow {
            epoch: epoch + 1,
            mean_cost: mc,
            mean_drop: md,
            sl_loss: sl,
            wallclock_seconds: started.elapsed().as_secs_f64(),
        });
        maybe_checkpoint(out_dir, &policy, Some(&adam), sched, epoch + 1, &meta)?;
    }
    Ok((policy, rows))
}

/// Replays a trajectory's per-step probabilities from scratch and returns the
/// product of the sampled-value probabilities (clamped like the sampler).
/// Used to verify recorded log-probabilities independently.
pub fn trajectory_probability(
    policy: &PolicySnapshot,
    traj: &MdpTrajectory,
    instance: &Instance,
    sched: &DiffusionSchedule,
) -> Result<f64> {
    let mut product = 1.0;
    for step in &traj.steps {
        let (x0_prob, _) = forward(
            &policy.params,
            policy.adapters.as_ref(),
            instance,
            &step.state_bits,
            step.t_hi,
            crate::diffusion::SAMPLING_BN,
        )?;
        for (v, &sampled) in step.action_bits.iter().enumerate() {
            let (lp, _) = posterior_logprob_grad(
                sched,
                step.state_bits[v],
                x0_prob[v],
                step.t_hi,
                step.t_lo,
                sampled,
            );
            product *= lp.exp();
        }
    }
    Ok(product)
}

/// Initial-noise helper reused by tests that need raw terminal states.
pub fn terminal_noise(instance: &Instance, sched: &DiffusionSchedule, rng: &mut Rng) -> NoisyState {
    sample_terminal_noise(instance.num_vars(), sched.t_max(), rng)
}
