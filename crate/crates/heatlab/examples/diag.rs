// Chain diagnostics: (1) synthetic-predictor sanity — a chain driven by a
// near-oracle x0 prediction must land on the optimal tour; (2) step-by-step
// statistics of the learned model's inference trajectory.

use heatlab::decoders::{decode, DecoderKind, Heatmap};
use heatlab::diffusion::*;
use heatlab::gnn::{forward, load_checkpoint, BnMode};
use heatlab::instances::*;
use heatlab::rng::derive_rng;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    synthetic();
    if let Some(ck) = args.first() {
        learned(ck);
    }
}

fn synthetic() {
    let sched = DiffusionSchedule::new(50, BetaSpec::Cosine).unwrap();
    let inst = gen_tsp(10, 1, 100).unwrap().remove(0);
    let wrapped = Instance::Tsp(inst.clone());
    let opt = exact_solve(&wrapped).unwrap();
    let optc = cost(&wrapped, &opt).unwrap();
    for conf in [1.0f64, 0.9, 0.7] {
        let mut ok = 0;
        for seed in 0..20u64 {
            let mut rng = derive_rng(seed, &[1]);
            let mut state = NoisyState {
                t: 50,
                bits: (0..opt.bits.len()).map(|i| u8::from(i % 2 == 0)).collect(),
            };
            // re-randomize initial bits
            state = forward_sample(&vec![0u8; opt.bits.len()], 50, &sched, &mut rng).unwrap();
            let grid = sched.time_grid(5).unwrap();
            let mut final_prob = vec![0.0; opt.bits.len()];
            for k in 0..grid.len() {
                // synthetic prediction: confident blend toward the optimum
                let x0p: Vec<f64> = opt
                    .bits
                    .iter()
                    .map(|&b| conf * f64::from(b) + (1.0 - conf) * 0.222)
                    .collect();
                if k + 1 < grid.len() {
                    let dist = posterior_to(&state, &x0p, &sched, grid[k + 1]).unwrap();
                    let (next, _) = sample_posterior(&dist, &mut rng);
                    state = next;
                } else {
                    final_prob = x0p;
                }
            }
            let hm = Heatmap::new(ProblemKind::Tsp, 10, final_prob.iter().map(|p| p.clamp(0.0, 1.0)).collect()).unwrap();
            let sol = decode(DecoderKind::Greedy, &hm, &wrapped).unwrap();
            let c = cost(&wrapped, &sol).unwrap();
            if (c - optc).abs() < 1e-9 {
                ok += 1;
            }
        }
        println!("synthetic conf {conf}: {ok}/20 exact decodes");
    }
}

fn learned(ck_path: &str) {
    let ck = load_checkpoint(ck_path).unwrap();
    let (policy, _, sched, _) = ck.into_policy().unwrap();
    let inst = gen_tsp(10, 1, 424).unwrap().remove(0);
    let wrapped = Instance::Tsp(inst.clone());
    let opt = exact_solve(&wrapped).unwrap();
    let optc = cost(&wrapped, &opt).unwrap();
    let mut rng = derive_rng(3, &[]);
    let mut state = heatlab::training::terminal_noise(&wrapped, &sched, &mut rng);
    let grid = sched.time_grid(5).unwrap();
    println!("grid {grid:?}; tour edges {}", opt.bits.iter().map(|&b| b as usize).sum::<usize>());
    for k in 0..grid.len() {
        let (x0p, _) = forward(&policy.params, None, &wrapped, &state.bits, state.t, BnMode::Eval).unwrap();
        let mean: f64 = x0p.iter().sum::<f64>() / x0p.len() as f64;
        let mx = x0p.iter().cloned().fold(0.0f64, f64::max);
        // agreement of top-10 predictions with optimal tour edges
        let mut idx: Vec<usize> = (0..x0p.len()).collect();
        idx.sort_by(|&a, &b| x0p[b].partial_cmp(&x0p[a]).unwrap());
        let top_correct = idx[..10].iter().filter(|&&i| opt.bits[i] == 1).count();
        let ones = state.bits.iter().map(|&b| b as usize).sum::<usize>();
        println!(
            "t={:2}: state ones {:2}, x0p mean {:.3} max {:.3}, top10 correct {}",
            state.t, ones, mean, mx, top_correct
        );
        if k + 1 < grid.len() {
            let dist = posterior_to(&state, &x0p, &sched, grid[k + 1]).unwrap();
            let (next, _) = sample_posterior(&dist, &mut rng);
            state = next;
        } else {
            let hm = Heatmap::new(ProblemKind::Tsp, 10, x0p).unwrap();
            let sol = decode(DecoderKind::Greedy, &hm, &wrapped).unwrap();
            let c = cost(&wrapped, &sol).unwrap();
            println!("decode drop {:.2}%", (c - optc) / optc * 100.0);
        }
    }
}
