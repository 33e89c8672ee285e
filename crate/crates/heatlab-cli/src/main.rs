//! Batch front-end wiring the pipeline: data generation, supervised
//! pre-training, RL fine-tuning, evaluation and analysis, all driven by one
//! experiment config file with explicit seeds.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

use clap::{Parser, Subcommand};
use heatlab::analysis::{decoder_mismatch_experiment, evaluate, extract_curves, mismatch_study};
use heatlab::config::{preset, ExperimentConfig, LabelSpec, PRESET_NAMES};
use heatlab::error::Error;
use heatlab::gnn::{load_checkpoint, save_checkpoint, Checkpoint};
use heatlab::instances::{
    dataset_content_hash, gen_er, gen_tsp, load_dataset, make_suboptimal_labels, save_dataset,
    Instance, LabeledDataset, ProblemKind,
};
use heatlab::training::{finetune_rl, pretrain_sl, write_log_csv};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "heatlab", about = "Heatmap solver laboratory: diffusion decoders, RL fine-tuning, analysis")]
struct Cli {
    /// Cap on worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled dataset (train + held-out) from the config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Supervised pre-training; writes checkpoints, a CSV log and metadata.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from the latest epoch checkpoint in the output directory.
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// RL fine-tuning from a pre-trained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Pre-trained checkpoint (defaults to the pretrain output).
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the held-out dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report output path (defaults to out_dir/eval_report.json).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mismatch study, decoder matrix and learning-curve extraction.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint for the mismatch study (optional).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Second checkpoint for the decoder matrix (optional; pairs with
        /// --checkpoint).
        #[arg(long)]
        checkpoint_nn: Option<PathBuf>,
        /// Training logs to extract curves from.
        #[arg(long)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a named preset config (or list presets).
    Preset {
        name: Option<String>,
        /// Root directory presets point their paths at.
        #[arg(long, default_value = "runs")]
        root: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::SchemaVersion { .. } | Error::Unsupported(_) => 2,
        Error::InvalidInstance(_)
        | Error::Infeasible(_)
        | Error::DimensionMismatch(_)
        | Error::OracleLimit { .. }
        | Error::Parse { .. }
        | Error::Io { .. } => 3,
        Error::Numerical(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
            .ok();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    Ok(cfg)
}

fn generate_split(cfg: &ExperimentConfig, count: usize, split_tag: u64) -> Result<Vec<Instance>, Error> {
    // Distinct sub-seeds keep train and held-out draws disjoint.
    let seed = cfg.seed.wrapping_mul(2).wrapping_add(split_tag);
    Ok(match cfg.problem.kind {
        ProblemKind::Tsp => gen_tsp(cfg.problem.n, count, seed)?
            .into_iter()
            .map(Instance::Tsp)
            .collect(),
        ProblemKind::Mis => gen_er(cfg.problem.n, cfg.problem.er_p, count, seed)?
            .into_iter()
            .map(Instance::Mis)
            .collect(),
    })
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::GenData { config, seed } => {
            let cfg = load_config(&config, seed)?;
            std::fs::create_dir_all(&cfg.paths.out_dir)
                .map_err(|e| Error::io(cfg.paths.out_dir.display().to_string(), e))?;
            for (count, path, split) in [
                (cfg.problem.train_count, Some(&cfg.paths.train_dataset), 0u64),
                (
                    cfg.problem.heldout_count,
                    cfg.paths.heldout_dataset.as_ref(),
                    1u64,
                ),
            ] {
                let Some(path) = path else { continue };
                if count == 0 {
                    continue;
                }
                let instances = generate_split(&cfg, count, split)?;
                let mut ds = LabeledDataset::with_exact_labels(instances, cfg.seed)?;
                let mut realized_drop = 0.0;
                if let LabelSpec::Suboptimal { budget } = cfg.problem.labels {
                    // Held-out labels stay exact so drops remain optimality gaps.
                    if split == 0 {
                        let (sub, report) = make_suboptimal_labels(&ds, budget, cfg.seed)?;
                        ds = sub;
                        realized_drop = report.mean_drop_pct;
                    }
                }
                save_dataset(path, &ds)?;
                let mean_cost: f64 =
                    ds.examples.iter().map(|e| e.label_cost).sum::<f64>() / ds.len() as f64;
                println!(
                    "wrote {} ({} instances, mean label cost {:.4}, provenance {:?}, label drop {:.3}%)",
                    path.display(),
                    ds.len(),
                    mean_cost,
                    ds.provenance,
                    realized_drop
                );
                println!("dataset hash {}", dataset_content_hash(&ds)?);
            }
            Ok(())
        }
        Command::Pretrain { config, seed, resume } => {
            let cfg = load_config(&config, seed)?;
            let dataset = load_dataset(&cfg.paths.train_dataset)?;
            let sched = cfg.schedule.build()?;
            let out_dir = cfg.paths.out_dir.join("pretrain");
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
            let meta = experiment_meta(&cfg, &dataset)?;
            let resume_state = if resume {
                find_resume(&out_dir, &cfg)?
            } else {
                None
            };
            let (policy, rows) = pretrain_sl(
                &cfg.gnn,
                &cfg.train,
                &dataset,
                &sched,
                Some(&out_dir),
                resume_state,
                meta.clone(),
            )?;
            let final_ck = Checkpoint::from_policy(&policy, None, &sched, meta);
            save_checkpoint(out_dir.join("checkpoint_final.json"), &final_ck)?;
            write_log_csv(&out_dir.join("log.csv"), &rows)?;
            println!(
                "pretrained {} epochs; final probe drop {:.3}%",
                rows.last().map_or(0, |r| r.epoch),
                rows.last().map_or(f64::NAN, |r| r.mean_drop)
            );
            Ok(())
        }
        Command::Finetune {
            config,
            from,
            seed,
            resume,
        } => {
            let cfg = load_config(&config, seed)?;
            let dataset = load_dataset(&cfg.paths.train_dataset)?;
            let sched = cfg.schedule.build()?;
            let out_dir = cfg.paths.out_dir.join("finetune");
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
            let from = from.unwrap_or_else(|| cfg.paths.out_dir.join("pretrain/checkpoint_final.json"));
            let ck = load_checkpoint(&from)?;
            ck.validate_config(&cfg.gnn)?;
            let (pretrained, _, _, _) = ck.into_policy()?;
            let meta = experiment_meta(&cfg, &dataset)?;
            let resume_state = if resume {
                find_resume(&out_dir, &cfg)?
            } else {
                None
            };
            let (policy, rows) = finetune_rl(
                &cfg.train,
                &cfg.reward,
                pretrained,
                &dataset,
                &sched,
                Some(&out_dir),
                resume_state,
                meta.clone(),
            )?;
            let final_ck = Checkpoint::from_policy(&policy, None, &sched, meta);
            save_checkpoint(out_dir.join("checkpoint_final.json"), &final_ck)?;
            write_log_csv(&out_dir.join("log.csv"), &rows)?;
            println!(
                "fine-tuned {} epochs; final probe drop {:.3}%",
                rows.last().map_or(0, |r| r.epoch),
                rows.last().map_or(f64::NAN, |r| r.mean_drop)
            );
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let dataset_path = cfg
                .paths
                .heldout_dataset
                .clone()
                .unwrap_or_else(|| cfg.paths.train_dataset.clone());
            let dataset = load_dataset(&dataset_path)?;
            let ck = load_checkpoint(&checkpoint)?;
            ck.validate_config(&cfg.gnn)?;
            let (policy, _, sched, _) = ck.into_policy()?;
            let report = evaluate(&policy, &dataset, &cfg.eval, &sched)?;
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.join("eval_report.json"));
            write_json(&out, &report)?;
            let csv = out.with_extension("csv");
            write_report_csv(&csv, &report)?;
            println!(
                "evaluated {} instances: mean cost {:.4}, mean drop {:.3}%{} ({:.1}s)",
                report.records.len(),
                report.mean_cost,
                report.mean_drop_pct,
                if report.drop_vs_label_only { " (vs label)" } else { "" },
                report.total_seconds
            );
            Ok(())
        }
        Command::Analyze {
            config,
            checkpoint,
            checkpoint_nn,
            logs,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let out_dir = out.unwrap_or_else(|| cfg.paths.out_dir.join("analysis"));
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
            if let Some(ck_path) = &checkpoint {
                let dataset_path = cfg
                    .paths
                    .heldout_dataset
                    .clone()
                    .unwrap_or_else(|| cfg.paths.train_dataset.clone());
                let dataset = load_dataset(&dataset_path)?;
                let ck = load_checkpoint(ck_path)?;
                ck.validate_config(&cfg.gnn)?;
                let (policy, _, sched, _) = ck.into_policy()?;
                let (records, corr) =
                    mismatch_study(&policy, &dataset, cfg.eval.decoder, cfg.eval.steps, cfg.eval.seed, &sched)?;
                write_json(&out_dir.join("mismatch_records.json"), &records)?;
                write_json(&out_dir.join("mismatch_correlations.json"), &corr)?;
                println!(
                    "mismatch study: spearman(loss, hamming) {:?}, spearman(hamming, drop) {:?}",
                    corr.loss_vs_hamming.spearman, corr.hamming_vs_drop.spearman
                );
                if let Some(nn_path) = &checkpoint_nn {
                    let ck2 = load_checkpoint(nn_path)?;
                    ck2.validate_config(&cfg.gnn)?;
                    let (policy_nn, _, _, _) = ck2.into_policy()?;
                    let matrix = decoder_mismatch_experiment(
                        &policy,
                        &policy_nn,
                        &dataset,
                        cfg.eval.steps,
                        cfg.eval.seed,
                        &sched,
                    )?;
                    write_json(&out_dir.join("decoder_matrix.json"), &matrix)?;
                    println!("decoder drop matrix: {matrix:?}");
                }
            }
            if !logs.is_empty() {
                let summary = extract_curves(&logs)?;
                write_json(&out_dir.join("curves.json"), &summary)?;
                let mut csv = String::from("run,epoch,drop,sl_loss\n");
                for s in &summary.series {
                    for ((e, d), l) in s.epochs.iter().zip(&s.drop).zip(&s.sl_loss) {
                        csv.push_str(&format!("{},{e},{d},{l}\n", s.path));
                    }
                }
                std::fs::write(out_dir.join("curves.csv"), csv)
                    .map_err(|e| Error::io("curves.csv", e))?;
                println!(
                    "curves: {}/{} runs divergent (drop down, denoising loss not down)",
                    summary.divergent_runs,
                    summary.series.len()
                );
            }
            Ok(())
        }
        Command::Preset { name, root, seed } => {
            match name {
                None => {
                    for n in PRESET_NAMES {
                        println!("{n}");
                    }
                }
                Some(n) => {
                    let cfg = preset(&n, &root, seed)?;
                    println!("{}", cfg.to_json()?);
                }
            }
            Ok(())
        }
    }
}

fn experiment_meta(cfg: &ExperimentConfig, dataset: &LabeledDataset) -> Result<serde_json::Value, Error> {
    Ok(serde_json::json!({
        "experiment": cfg.name,
        "seed": cfg.seed,
        "train_config": cfg.train,
        "reward_config": cfg.reward,
        "dataset_hash": dataset_content_hash(dataset)?,
    }))
}

/// Finds the newest epoch checkpoint in a directory for resumption.
fn find_resume(
    out_dir: &Path,
    cfg: &ExperimentConfig,
) -> Result<Option<(heatlab::gnn::PolicySnapshot, heatlab::gnn::AdamState, usize)>, Error> {
    let mut best: Option<(usize, PathBuf)> = None;
    if let Ok(entries) = std::fs::read_dir(out_dir) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(num) = name
                .strip_prefix("checkpoint_epoch_")
                .and_then(|s| s.strip_suffix(".json"))
                .and_then(|s| s.parse::<usize>().ok())
            {
                if best.as_ref().map_or(true, |(b, _)| num > *b) {
                    best = Some((num, entry.path()));
                }
            }
        }
    }
    let Some((epoch, path)) = best else {
        return Ok(None);
    };
    let ck = load_checkpoint(&path)?;
    ck.validate_config(&cfg.gnn)?;
    let (policy, adam, _, _) = ck.into_policy()?;
    let adam = adam.ok_or_else(|| {
        Error::Config(format!("checkpoint {} lacks optimizer state, cannot resume", path.display()))
    })?;
    println!("resuming from {} (epoch {epoch})", path.display());
    Ok(Some((policy, adam, epoch)))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let body = serde_json::to_vec_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_report_csv(path: &Path, report: &heatlab::analysis::EvalReport) -> Result<(), Error> {
    let mut body = String::from("id,cost,reference_cost,drop_pct,hamming,sl_loss,decode_seconds\n");
    for r in &report.records {
        body.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.id, r.cost, r.reference_cost, r.drop_pct, r.hamming_to_label, r.sl_loss, r.decode_seconds
        ));
    }
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}
