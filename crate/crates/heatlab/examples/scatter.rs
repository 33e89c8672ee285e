// Dump mismatch-study triples for a checkpoint to inspect the H1/H2 pattern.
use heatlab::analysis::mismatch_study;
use heatlab::decoders::DecoderKind;
use heatlab::instances::{gen_tsp, load_dataset, save_dataset, Instance, LabeledDataset};
use std::path::PathBuf;

fn main() {
    let ck_path = std::env::args().nth(1).expect("checkpoint path");
    let n: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let path = PathBuf::from(format!("/tmp/heatlab-cal/heldout-n{n}-c500-s200.jsonl"));
    let heldout = if path.exists() {
        load_dataset(&path).unwrap()
    } else {
        let insts = gen_tsp(n, 500, 200).unwrap().into_iter().map(Instance::Tsp).collect();
        let ds = LabeledDataset::with_exact_labels(insts, 200).unwrap();
        save_dataset(&path, &ds).unwrap();
        ds
    };
    let ck = heatlab::gnn::load_checkpoint(&ck_path).unwrap();
    let (policy, _, sched, _) = ck.into_policy().unwrap();
    let (records, corr) = mismatch_study(&policy, &heldout, DecoderKind::Greedy, 5, 777, &sched).unwrap();
    println!("corr: H1 {:?} H2 {:?}", corr.loss_vs_hamming, corr.hamming_vs_drop);
    // Summaries per hamming bucket
    let mut by_ham: std::collections::BTreeMap<usize, Vec<(f64, f64)>> = Default::default();
    for r in &records {
        by_ham.entry(r.hamming).or_default().push((r.sl_loss, r.drop_pct));
    }
    for (h, v) in &by_ham {
        let msl: f64 = v.iter().map(|x| x.0).sum::<f64>() / v.len() as f64;
        let md: f64 = v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
        println!("ham {h:2}: count {:3}, mean sl {msl:.3}, mean drop {md:.2}%", v.len());
    }
    let mean_drop: f64 = records.iter().map(|r| r.drop_pct).sum::<f64>() / records.len() as f64;
    println!("mean drop {mean_drop:.2}%");
}
