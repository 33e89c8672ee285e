// Calibration harness for the desk-scale experiments: measures how the
// supervised and RL phases behave under candidate hyperparameters so the
// committed experiment settings pass their targets with margin.
//
// Usage: cargo run --release -p heatlab --example calibrate -- <phase> [args]

use heatlab::analysis::{evaluate, mismatch_study, EvalConfig, Refinement};
use heatlab::config as _;
use heatlab::decoders::DecoderKind;
use heatlab::diffusion::{BetaSpec, DiffusionSchedule};
use heatlab::gnn::GnnConfig;
use heatlab::instances::{
    gen_tsp, load_dataset, make_suboptimal_labels, save_dataset, Instance, LabeledDataset,
};
use heatlab::training::{finetune_rl, pretrain_sl, RewardConfig, TrainConfig};
use std::path::PathBuf;

fn dataset_cached(n: usize, count: usize, seed: u64, tag: &str) -> LabeledDataset {
    let path = PathBuf::from(format!("/tmp/heatlab-cal/{tag}-n{n}-c{count}-s{seed}.jsonl"));
    if path.exists() {
        if let Ok(ds) = load_dataset(&path) {
            return ds;
        }
    }
    let instances = gen_tsp(n, count, seed).unwrap().into_iter().map(Instance::Tsp).collect();
    let ds = LabeledDataset::with_exact_labels(instances, seed).unwrap();
    save_dataset(&path, &ds).unwrap();
    ds
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let phase = args.first().map(String::as_str).unwrap_or("help");
    match phase {
        "sl10" => sl_phase(10, &args[1..]),
        "sl20" => sl_phase(20, &args[1..]),
        "rl20" => rl_phase(&args[1..]),
        "subopt" => subopt_phase(&args[1..]),
        other => {
            eprintln!("unknown phase {other}; phases: sl10 sl20 rl20 subopt");
        }
    }
}

fn parse<T: std::str::FromStr>(args: &[String], key: &str, default: T) -> T {
    for a in args {
        if let Some(v) = a.strip_prefix(&format!("{key}=")) {
            if let Ok(x) = v.parse() {
                return x;
            }
        }
    }
    default
}

fn sl_phase(n: usize, args: &[String]) {
    let train_count = parse(args, "train", 2000);
    let epochs = parse(args, "epochs", 12);
    let hidden = parse(args, "hidden", 32);
    let depth = parse(args, "depth", 4);
    let lr = parse(args, "lr", 2e-4);
    let batch = parse(args, "batch", 32);
    let steps = parse(args, "steps", 5);
    let seed = parse(args, "seed", 0);

    let t0 = std::time::Instant::now();
    let train = dataset_cached(n, train_count, 100, "train");
    let heldout = dataset_cached(n, 500, 200, "heldout");
    eprintln!("datasets ready in {:.1}s", t0.elapsed().as_secs_f64());

    let sched = if parse(args, "sched", String::from("cosine")) == "linear" {
        DiffusionSchedule::new(50, BetaSpec::default_linear()).unwrap()
    } else {
        DiffusionSchedule::new(50, BetaSpec::Cosine).unwrap()
    };
    let mut gnn = GnnConfig::new(heatlab::instances::ProblemKind::Tsp, depth, hidden).unwrap();
    gnn.coord_freqs = parse(args, "freqs", 8);
    let mut cfg = TrainConfig::sl_default(seed);
    cfg.epochs = epochs;
    cfg.batch_size = batch;
    cfg.learning_rate = lr;
    cfg.probe_size = 64;
    cfg.probe_steps = steps;

    let t0 = std::time::Instant::now();
    let (policy, rows) = pretrain_sl(&gnn, &cfg, &train, &sched, None, None, serde_json::Value::Null).unwrap();
    eprintln!("SL training {:.1}s", t0.elapsed().as_secs_f64());
    for r in &rows {
        eprintln!(
            "epoch {:2}: probe drop {:7.2}% loss {:.4}",
            r.epoch, r.mean_drop, r.sl_loss
        );
    }
    for s in [steps, 2 * steps, 10 * steps] {
        if s > 50 { continue; }
        let ecfg = EvalConfig {
            decoder: DecoderKind::Greedy,
            refinement: Refinement::None,
            steps: s,
            seed: 999,
        };
        let report = evaluate(&policy, &heldout, &ecfg, &sched).unwrap();
        eprintln!("heldout drop ({s} steps) {:.2}% (mean cost {:.4})", report.mean_drop_pct, report.mean_cost);
    }

    let (_, corr) = mismatch_study(&policy, &heldout, DecoderKind::Greedy, steps, 777, &sched).unwrap();
    eprintln!(
        "H1 spearman(loss,ham) {:?}  H2 spearman(ham,drop) {:?}",
        corr.loss_vs_hamming.spearman, corr.hamming_vs_drop.spearman
    );

    let out = format!("/tmp/heatlab-cal/sl{n}-e{epochs}-h{hidden}-seed{seed}.ckpt.json");
    let ck = heatlab::gnn::Checkpoint::from_policy(&policy, None, &sched, serde_json::Value::Null);
    heatlab::gnn::save_checkpoint(&out, &ck).unwrap();
    eprintln!("saved {out}");
}

fn rl_phase(args: &[String]) {
    let n = 20usize;
    let ckpt: String = parse(args, "ckpt", String::from("/tmp/heatlab-cal/sl20-e12-h32-seed0.ckpt.json"));
    let epochs = parse(args, "epochs", 10);
    let samples = parse(args, "samples", 256);
    let batch = parse(args, "batch", 32);
    let lr = parse(args, "lr", 4e-4);
    let tsteps = parse(args, "tsteps", 5);
    let steps = parse(args, "steps", 5);
    let seed = parse(args, "seed", 0);
    let reward = parse(args, "reward", String::from("lcr"));
    let decoder = if parse(args, "decoder", String::from("greedy")) == "nn" {
        DecoderKind::NearestNeighbor
    } else {
        DecoderKind::Greedy
    };

    let train = dataset_cached(n, parse(args, "train", 2000), 100, "train");
    let heldout = dataset_cached(n, 500, 200, "heldout");
    let ck = heatlab::gnn::load_checkpoint(&ckpt).unwrap();
    let (pretrained, _, sched, _) = ck.into_policy().unwrap();

    let mut cfg = TrainConfig::rl_default(seed);
    cfg.epochs = epochs;
    cfg.samples_per_epoch = samples;
    cfg.batch_size = batch;
    cfg.learning_rate = lr;
    cfg.rollout_steps = tsteps;
    cfg.decoder = decoder;
    cfg.probe_size = 64;
    cfg.probe_steps = steps;
    let rcfg = if reward == "sr" { RewardConfig::sr() } else { RewardConfig::lcr() };

    let ecfg = EvalConfig {
        decoder,
        refinement: Refinement::None,
        steps,
        seed: 999,
    };
    let before = evaluate(&pretrained, &heldout, &ecfg, &sched).unwrap();
    eprintln!("SL heldout drop {:.2}%", before.mean_drop_pct);

    let t0 = std::time::Instant::now();
    let (policy, rows) = finetune_rl(&cfg, &rcfg, pretrained, &train, &sched, None, None, serde_json::Value::Null).unwrap();
    eprintln!("RL training {:.1}s", t0.elapsed().as_secs_f64());
    for r in &rows {
        eprintln!(
            "epoch {:2}: probe drop {:7.2}% loss {:.4}",
            r.epoch, r.mean_drop, r.sl_loss
        );
    }
    let after = evaluate(&policy, &heldout, &ecfg, &sched).unwrap();
    eprintln!(
        "RL heldout drop {:.2}% (relative improvement {:.1}%)",
        after.mean_drop_pct,
        (before.mean_drop_pct - after.mean_drop_pct) / before.mean_drop_pct * 100.0
    );
    let out = format!("/tmp/heatlab-cal/rl20-{reward}-{}-seed{seed}.ckpt.json", if decoder == DecoderKind::Greedy { "grdy" } else { "nn" });
    let ckout = heatlab::gnn::Checkpoint::from_policy(&policy, None, &sched, serde_json::Value::Null);
    heatlab::gnn::save_checkpoint(&out, &ckout).unwrap();
    eprintln!("saved {out}");
}

fn subopt_phase(args: &[String]) {
    let n = parse(args, "n", 10);
    let count = parse(args, "count", 500);
    for budget in [0usize, 1, 2, 3, 5, 8, 12, 20, 40, usize::MAX] {
        let ds = dataset_cached(n, count, 100, "train");
        let (_, report) = make_suboptimal_labels(&ds, budget, 7).unwrap();
        eprintln!("n={n} budget {budget:>20}: mean drop {:.3}%", report.mean_drop_pct);
    }
}
