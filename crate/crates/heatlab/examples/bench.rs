// Rough timing of the hot paths at desk scale.
use heatlab::diffusion::*;
use heatlab::gnn::*;
use heatlab::instances::*;
use heatlab::rng::derive_rng;
use std::time::Instant;

fn main() {
    // Held-Karp n=20
    let inst = gen_tsp(20, 4, 1).unwrap();
    let t0 = Instant::now();
    for i in &inst {
        let _ = exact_solve(&Instance::Tsp(i.clone())).unwrap();
    }
    println!("held-karp n=20: {:.3}s each", t0.elapsed().as_secs_f64() / 4.0);

    // Forward/backward at TSP-20, d=32, depth 4
    let cfg = GnnConfig::new(ProblemKind::Tsp, 4, 32).unwrap();
    let policy = PolicySnapshot::new(&cfg, 0).unwrap();
    let wrapped = Instance::Tsp(inst[0].clone());
    let sched = DiffusionSchedule::new(50, BetaSpec::default_linear()).unwrap();
    let sol = exact_solve(&wrapped).unwrap();
    let mut rng = derive_rng(0, &[]);
    let xt = forward_sample(&sol.bits, 25, &sched, &mut rng).unwrap();
    let t0 = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        let _ = forward(&policy.params, None, &wrapped, &xt.bits, 25, BnMode::Train).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    println!("forward tsp20 d32: {:.2}ms", fwd * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let out = sl_loss_at(&policy, &sol, &wrapped, &xt, BnMode::Train).unwrap();
        std::hint::black_box(out.loss);
    }
    println!("fwd+bwd sl_loss tsp20 d32: {:.2}ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // Heatmap inference, 5 steps
    let t0 = Instant::now();
    for k in 0..10u64 {
        let mut r = derive_rng(k, &[]);
        let _ = sample_heatmap(&policy, &wrapped, 5, &sched, &mut r).unwrap();
    }
    println!("sample_heatmap 5 steps: {:.2}ms", t0.elapsed().as_secs_f64() / 10.0 * 1e3);

    // MIS brute force n=18
    let g = gen_er(18, 0.25, 2, 3).unwrap();
    let t0 = Instant::now();
    for gi in &g {
        let _ = exact_solve(&Instance::Mis(gi.clone())).unwrap();
    }
    println!("mis bnb n=18: {:.3}ms each", t0.elapsed().as_secs_f64() / 2.0 * 1e3);
}
