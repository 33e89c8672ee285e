//! Exact small-instance oracles: Held-Karp dynamic programming for TSP and
//! branch-and-bound for MIS. Both return provably optimal solutions and are
//! the ground truth for labels and drop computations.

use super::{Instance, MisInstance, Solution, TspInstance};
use crate::error::{Error, Result};

/// Largest TSP size the Held-Karp oracle accepts. At n=20 the table holds
/// 2^19 * 19 entries (~80 MB of f64) and a solve takes well under a second.
pub const TSP_ORACLE_LIMIT: usize = 20;

/// Largest MIS size the branch-and-bound oracle accepts.
pub const MIS_ORACLE_LIMIT: usize = 40;

/// Solves an instance exactly, or fails with an oracle-limit error.
pub fn exact_solve(instance: &Instance) -> Result<Solution> {
    match instance {
        Instance::Tsp(t) => held_karp_tsp(t),
        Instance::Mis(m) => mis_branch_and_bound(m),
    }
}

/// Held-Karp dynamic program over subsets of the non-start vertices.
///
/// The inner recurrence pulls from the previous subset row, which keeps reads
/// contiguous: dp[mask][j] = min over k in mask\{j} of dp[mask\{j}][k] + d(k+1, j+1).
pub fn held_karp_tsp(instance: &TspInstance) -> Result<Solution> {
    let n = instance.n();
    if n > TSP_ORACLE_LIMIT {
        return Err(Error::OracleLimit {
            kind: "tsp",
            n,
            limit: TSP_ORACLE_LIMIT,
        });
    }
    let m = n - 1; // vertices 1..n relative to the fixed start 0
    let full: usize = (1 << m) - 1;
    let dist = instance.dist_matrix();
    let d = |a: usize, b: usize| dist[a * n + b];

    let mut dp = vec![f64::INFINITY; (full + 1) * m];
    let mut parent = vec![u8::MAX; (full + 1) * m];
    for j in 0..m {
        dp[(1 << j) * m + j] = d(0, j + 1);
    }
    for mask in 1..=full {
        if mask.count_ones() < 2 {
            continue;
        }
        let base = mask * m;
        let mut bits = mask;
        while bits != 0 {
            let j = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            let prev_mask = mask & !(1 << j);
            let prev_base = prev_mask * m;
            let mut best = f64::INFINITY;
            let mut best_k = u8::MAX;
            let mut kbits = prev_mask;
            while kbits != 0 {
                let k = kbits.trailing_zeros() as usize;
                kbits &= kbits - 1;
                let cand = dp[prev_base + k] + d(k + 1, j + 1);
                if cand < best {
                    best = cand;
                    best_k = k as u8;
                }
            }
            dp[base + j] = best;
            parent[base + j] = best_k;
        }
    }
    // Close the tour back to vertex 0.
    let mut best = f64::INFINITY;
    let mut last = 0usize;
    for j in 0..m {
        let cand = dp[full * m + j] + d(j + 1, 0);
        if cand < best {
            best = cand;
            last = j;
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut mask = full;
    let mut cur = last;
    while mask != 0 {
        order.push(cur + 1);
        let p = parent[mask * m + cur];
        mask &= !(1 << cur);
        if p == u8::MAX {
            break;
        }
        cur = p as usize;
    }
    order.push(0);
    order.reverse();
    debug_assert_eq!(order.len(), n);
    Solution::from_tour(n, &order)
}

/// Branch-and-bound maximum independent set with greedy degree reductions.
///
/// Vertices of degree 0 are taken; degree-1 vertices are taken over their
/// neighbor; otherwise the algorithm branches on a maximum-degree vertex,
/// excluding or including it (including removes its whole neighborhood).
pub fn mis_branch_and_bound(instance: &MisInstance) -> Result<Solution> {
    let n = instance.n;
    if n > MIS_ORACLE_LIMIT {
        return Err(Error::OracleLimit {
            kind: "mis",
            n,
            limit: MIS_ORACLE_LIMIT,
        });
    }
    let mut adj = vec![0u64; n];
    for &(u, v) in &instance.edges {
        adj[u as usize] |= 1 << v;
        adj[v as usize] |= 1 << u;
    }
    let all: u64 = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };

    struct Ctx<'a> {
        adj: &'a [u64],
        best_size: u32,
        best_set: u64,
    }

    fn search(ctx: &mut Ctx, remaining: u64, chosen: u64, chosen_size: u32) {
        if chosen_size + remaining.count_ones() <= ctx.best_size {
            return; // even taking everything left cannot beat the incumbent
        }
        if remaining == 0 {
            ctx.best_size = chosen_size;
            ctx.best_set = chosen;
            return;
        }
        // Greedy reductions: degree-0 vertices always join; a degree-1 vertex
        // is at least as good as its neighbor.
        let mut rem = remaining;
        let mut ch = chosen;
        let mut size = chosen_size;
        let mut reduced = true;
        while reduced {
            reduced = false;
            let mut scan = rem;
            while scan != 0 {
                let v = scan.trailing_zeros() as usize;
                scan &= scan - 1;
                if rem >> v & 1 == 0 {
                    continue; // removed by an earlier reduction in this sweep
                }
                let nb = ctx.adj[v] & rem;
                let deg = nb.count_ones();
                if deg == 0 {
                    ch |= 1 << v;
                    size += 1;
                    rem &= !(1 << v);
                    reduced = true;
                } else if deg == 1 {
                    ch |= 1 << v;
                    size += 1;
                    rem &= !((1 << v) | nb);
                    reduced = true;
                }
            }
        }
        if rem == 0 {
            if size > ctx.best_size {
                ctx.best_size = size;
                ctx.best_set = ch;
            }
            return;
        }
        if size + rem.count_ones() <= ctx.best_size {
            return;
        }
        // Branch on a maximum-degree vertex.
        let mut pivot = 0usize;
        let mut pivot_deg = 0u32;
        let mut scan = rem;
        while scan != 0 {
            let v = scan.trailing_zeros() as usize;
            scan &= scan - 1;
            let deg = (ctx.adj[v] & rem).count_ones();
            if deg >= pivot_deg {
                pivot_deg = deg;
                pivot = v;
            }
        }
        // Include pivot.
        search(
            ctx,
            rem & !((1 << pivot) | ctx.adj[pivot]),
            ch | (1 << pivot),
            size + 1,
        );
        // Exclude pivot.
        search(ctx, rem & !(1 << pivot), ch, size);
    }

    let mut ctx = Ctx {
        adj: &adj,
        best_size: 0,
        best_set: 0,
    };
    search(&mut ctx, all, 0, 0);

    let selected: Vec<usize> = (0..n).filter(|&v| ctx.best_set >> v & 1 == 1).collect();
    Solution::from_selected(n, &selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{check_feasible, cost, gen_er, gen_tsp};

    /// Brute-force TSP by enumerating permutations with vertex 0 fixed.
    pub(crate) fn brute_force_tsp(instance: &TspInstance) -> f64 {
        let n = instance.n();
        let mut order: Vec<usize> = (1..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut order, 0, &mut |perm| {
            let mut full = vec![0usize];
            full.extend_from_slice(perm);
            let c = instance.tour_cost(&full);
            if c < best {
                best = c;
            }
        });
        best
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }

    /// Brute-force MIS by subset enumeration.
    pub(crate) fn brute_force_mis(instance: &MisInstance) -> u32 {
        let n = instance.n;
        let mut adj = vec![0u64; n];
        for &(u, v) in &instance.edges {
            adj[u as usize] |= 1 << v;
            adj[v as usize] |= 1 << u;
        }
        let mut best = 0;
        for set in 0u64..(1 << n) {
            if set.count_ones() <= best {
                continue;
            }
            let mut ok = true;
            let mut scan = set;
            while scan != 0 {
                let v = scan.trailing_zeros() as usize;
                scan &= scan - 1;
                if adj[v] & set != 0 {
                    ok = false;
                    break;
                }
            }
            if ok {
                best = set.count_ones();
            }
        }
        best
    }

    #[test]
    fn triangle_has_unique_tour() {
        let inst = gen_tsp(3, 1, 5).unwrap().remove(0);
        let sol = held_karp_tsp(&inst).unwrap();
        assert_eq!(sol.bits, vec![1, 1, 1]);
    }

    #[test]
    fn five_cycle_alpha_is_two() {
        let c5 = MisInstance::new("c5", 5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]).unwrap();
        let sol = mis_branch_and_bound(&c5).unwrap();
        assert_eq!(sol.bits.iter().filter(|&&b| b == 1).count(), 2);
        let wrapped = Instance::Mis(c5);
        assert!(check_feasible(&wrapped, &sol).unwrap().is_feasible());
    }

    #[test]
    fn held_karp_matches_brute_force_small() {
        for seed in 0..20 {
            let inst = gen_tsp(7, 1, seed).unwrap().remove(0);
            let sol = held_karp_tsp(&inst).unwrap();
            let hk = cost(&Instance::Tsp(inst.clone()), &sol).unwrap();
            let bf = brute_force_tsp(&inst);
            assert!(
                (hk - bf).abs() < 1e-9,
                "seed {seed}: held-karp {hk} vs brute force {bf}"
            );
        }
    }

    #[test]
    fn bnb_matches_enumeration_small() {
        for seed in 0..20 {
            let inst = gen_er(12, 0.3, 1, seed).unwrap().remove(0);
            let sol = mis_branch_and_bound(&inst).unwrap();
            let got = sol.bits.iter().filter(|&&b| b == 1).count() as u32;
            let want = brute_force_mis(&inst);
            assert_eq!(got, want, "seed {seed}");
            assert!(check_feasible(&Instance::Mis(inst), &sol).unwrap().is_feasible());
        }
    }

    #[test]
    fn oracle_limits_are_enforced() {
        let coords = (0..21).map(|i| [i as f64 / 21.0, 0.5]).collect();
        let big = TspInstance::new("big", coords).unwrap();
        assert!(matches!(
            held_karp_tsp(&big),
            Err(Error::OracleLimit { kind: "tsp", .. })
        ));
        let big_mis = MisInstance::new("big-mis", 41, vec![]).unwrap();
        assert!(matches!(
            mis_branch_and_bound(&big_mis),
            Err(Error::OracleLimit { kind: "mis", .. })
        ));
    }
}
