//! Non-differentiable post-processing decoders, 2-opt refinement and the
//! structural Hamming distance.
//!
//! All decoders are deterministic: ties are broken lexicographically, so
//! identical inputs give bitwise identical outputs.

use crate::error::{Error, Result};
use crate::instances::{
    num_pairs, pair_from_index, pair_index, Feasibility, Instance, MisInstance, ProblemKind,
    Solution, TspInstance,
};
use serde::{Deserialize, Serialize};

/// Decoder choice for projecting heatmaps onto feasible solutions. MIS always
/// uses greedy vertex selection; the nearest-neighbor decoder is TSP-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderKind {
    #[serde(rename = "greedy")]
    Greedy,
    #[serde(rename = "nn")]
    NearestNeighbor,
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecoderKind::Greedy => write!(f, "greedy"),
            DecoderKind::NearestNeighbor => write!(f, "nn"),
        }
    }
}

/// Dispatches a heatmap to the decoder matching the instance kind.
pub fn decode(kind: DecoderKind, heatmap: &Heatmap, instance: &Instance) -> Result<Solution> {
    match instance {
        Instance::Tsp(t) => match kind {
            DecoderKind::Greedy => greedy_tsp_decode(heatmap, t),
            DecoderKind::NearestNeighbor => nn_tsp_decode(heatmap, t),
        },
        Instance::Mis(m) => match kind {
            DecoderKind::Greedy => greedy_mis_decode(heatmap, m),
            DecoderKind::NearestNeighbor => Err(Error::Config(
                "nearest-neighbor decoding is defined for TSP only".into(),
            )),
        },
    }
}

/// Per-variable selection probabilities: pair-indexed for TSP (symmetric by
/// construction), vertex-indexed for MIS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub kind: ProblemKind,
    pub n: usize,
    pub probs: Vec<f64>,
}

impl Heatmap {
    pub fn new(kind: ProblemKind, n: usize, probs: Vec<f64>) -> Result<Self> {
        let expect = match kind {
            ProblemKind::Tsp => num_pairs(n),
            ProblemKind::Mis => n,
        };
        if probs.len() != expect {
            return Err(Error::DimensionMismatch(format!(
                "{kind} heatmap over n={n} expects {expect} entries, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
            return Err(Error::Numerical("heatmap entries must lie in [0,1]".into()));
        }
        Ok(Self { kind, n, probs })
    }

    /// Builds a TSP heatmap from a dense n x n matrix, averaging (i,j) and
    /// (j,i); rejects matrices that are not symmetric within 1e-12.
    pub fn from_dense_tsp(n: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != n * n {
            return Err(Error::DimensionMismatch(format!(
                "dense heatmap expects {} entries, got {}",
                n * n,
                dense.len()
            )));
        }
        let mut probs = vec![0.0; num_pairs(n)];
        for i in 0..n {
            for j in (i + 1)..n {
                let a = dense[i * n + j];
                let b = dense[j * n + i];
                if (a - b).abs() > 1e-12 {
                    return Err(Error::Numerical(format!(
                        "heatmap asymmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
                probs[pair_index(n, i, j)] = 0.5 * (a + b);
            }
        }
        Heatmap::new(ProblemKind::Tsp, n, probs)
    }

    /// Heatmap that is exactly the 0/1 indicator of a solution.
    pub fn indicator(solution: &Solution) -> Self {
        Heatmap {
            kind: solution.kind,
            n: solution.n,
            probs: solution.bits.iter().map(|&b| f64::from(b)).collect(),
        }
    }

    /// Dense n x n matrix view of a TSP heatmap (zero diagonal).
    pub fn to_dense_tsp(&self) -> Vec<f64> {
        let n = self.n;
        let mut dense = vec![0.0; n * n];
        for (idx, &p) in self.probs.iter().enumerate() {
            let (i, j) = pair_from_index(n, idx);
            dense[i * n + j] = p;
            dense[j * n + i] = p;
        }
        dense
    }

    fn check_matches(&self, kind: ProblemKind, n: usize) -> Result<()> {
        if self.kind != kind || self.n != n {
            return Err(Error::DimensionMismatch(format!(
                "heatmap ({}, n={}) does not match instance ({kind}, n={n})",
                self.kind, self.n
            )));
        }
        Ok(())
    }
}

/// Greedy edge insertion: edges sorted by probability descending (ties by
/// (i,j) lexicographic order); an edge is accepted iff both endpoints have
/// degree < 2 and it does not close a cycle shorter than n. Always yields a
/// feasible tour.
pub fn greedy_tsp_decode(heatmap: &Heatmap, instance: &TspInstance) -> Result<Solution> {
    let n = instance.n();
    heatmap.check_matches(ProblemKind::Tsp, n)?;
    let mut order: Vec<u32> = (0..num_pairs(n) as u32).collect();
    // Stable descending sort by probability; index order breaks ties and the
    // pair index itself is (i,j)-lexicographic.
    order.sort_by(|&a, &b| {
        heatmap.probs[b as usize]
            .partial_cmp(&heatmap.probs[a as usize])
            .expect("heatmap probabilities are finite")
            .then(a.cmp(&b))
    });

    let mut degree = vec![0u8; n];
    let mut uf = UnionFind::new(n);
    let mut bits = vec![0u8; num_pairs(n)];
    let mut accepted = 0usize;
    for &idx in &order {
        if accepted == n {
            break;
        }
        let (i, j) = pair_from_index(n, idx as usize);
        if degree[i] >= 2 || degree[j] >= 2 {
            continue;
        }
        let same = uf.find(i) == uf.find(j);
        if same && accepted != n - 1 {
            continue; // would close a short cycle
        }
        bits[idx as usize] = 1;
        degree[i] += 1;
        degree[j] += 1;
        uf.union(i, j);
        accepted += 1;
    }
    debug_assert_eq!(accepted, n);
    Solution::new(ProblemKind::Tsp, n, bits)
}

/// Nearest-neighbor style decoding: start at vertex 0 and repeatedly move to
/// the unvisited vertex with the highest heatmap probability from the current
/// vertex (ties by smallest index), closing the tour at the end.
pub fn nn_tsp_decode(heatmap: &Heatmap, instance: &TspInstance) -> Result<Solution> {
    let n = instance.n();
    heatmap.check_matches(ProblemKind::Tsp, n)?;
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut cur = 0usize;
    visited[0] = true;
    order.push(0);
    for _ in 1..n {
        let mut best: Option<(f64, usize)> = None;
        for next in 0..n {
            if visited[next] || next == cur {
                continue;
            }
            let p = heatmap.probs[pair_index(n, cur, next)];
            let better = match best {
                None => true,
                Some((bp, _)) => p > bp,
            };
            if better {
                best = Some((p, next));
            }
        }
        let (_, next) = best.expect("unvisited vertex exists");
        visited[next] = true;
        order.push(next);
        cur = next;
    }
    Solution::from_tour(n, &order)
}

/// Greedy vertex selection for MIS: vertices sorted by probability descending
/// (ties by index); a vertex joins iff no neighbor is already selected. The
/// result is maximal.
pub fn greedy_mis_decode(heatmap: &Heatmap, instance: &MisInstance) -> Result<Solution> {
    let n = instance.n;
    heatmap.check_matches(ProblemKind::Mis, n)?;
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| {
        heatmap.probs[b as usize]
            .partial_cmp(&heatmap.probs[a as usize])
            .expect("heatmap probabilities are finite")
            .then(a.cmp(&b))
    });
    let adj = instance.adjacency();
    let mut selected = vec![false; n];
    for &v in &order {
        let v = v as usize;
        if adj[v].iter().all(|&u| !selected[u as usize]) {
            selected[v] = true;
        }
    }
    let bits = selected.iter().map(|&s| u8::from(s)).collect();
    Solution::new(ProblemKind::Mis, n, bits)
}

/// First-improvement 2-opt. One iteration scans tour position pairs in
/// lexicographic order and applies the first cost-reducing segment reversal;
/// iterations repeat until a full scan finds no improvement or
/// `max_exchanges` improving exchanges have been applied. Cost never
/// increases and the output is feasible.
pub fn two_opt(instance: &TspInstance, solution: &Solution, max_exchanges: usize) -> Result<Solution> {
    let n = instance.n();
    if solution.kind != ProblemKind::Tsp || solution.n != n {
        return Err(Error::DimensionMismatch("2-opt expects a matching TSP solution".into()));
    }
    let mut order = solution.tour_order()?; // errors on infeasible input
    let mut exchanges = 0usize;
    'outer: while exchanges < max_exchanges {
        for a in 0..n.saturating_sub(1) {
            for b in (a + 1)..n {
                // Reversing order[a+1..=b] replaces edges (a,a+1) and (b,b+1)
                // with (a,b) and (a+1,b+1).
                let va = order[a];
                let va1 = order[(a + 1) % n];
                let vb = order[b];
                let vb1 = order[(b + 1) % n];
                if va == vb1 || va1 == vb {
                    continue;
                }
                let delta = instance.dist(va, vb) + instance.dist(va1, vb1)
                    - instance.dist(va, va1)
                    - instance.dist(vb, vb1);
                if delta < -1e-12 {
                    order[a + 1..=b].reverse();
                    exchanges += 1;
                    continue 'outer;
                }
            }
        }
        break; // full scan without improvement: converged
    }
    Solution::from_tour(n, &order)
}

/// Structural Hamming distance.
///
/// TSP uses the halved-symmetric-difference convention: |E(a) xor E(b)| / 2,
/// so two n-edge tours sharing k edges are at distance n - k. For tours the
/// symmetric difference is always even; for arbitrary indicator vectors the
/// halving rounds up, which keeps the metric axioms. MIS counts differing
/// vertex indicators directly.
pub fn hamming(a: &Solution, b: &Solution) -> Result<usize> {
    if a.kind != b.kind || a.n != b.n {
        return Err(Error::DimensionMismatch(format!(
            "hamming between ({}, n={}) and ({}, n={})",
            a.kind, a.n, b.kind, b.n
        )));
    }
    let disagreements = a.bits.iter().zip(&b.bits).filter(|(x, y)| x != y).count();
    Ok(match a.kind {
        ProblemKind::Tsp => disagreements.div_ceil(2),
        ProblemKind::Mis => disagreements,
    })
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] as usize != root {
            root = self.parent[root] as usize;
        }
        let mut cur = x;
        while cur != root {
            let next = self.parent[cur] as usize;
            self.parent[cur] = root as u32;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            self.parent[ra] = rb as u32;
        }
    }
}

/// Checks that a decode output is feasible; used by fuzz tests.
pub fn assert_feasible(instance: &Instance, solution: &Solution) -> Result<()> {
    match crate::instances::check_feasible(instance, solution)? {
        Feasibility::Feasible => Ok(()),
        Feasibility::Infeasible(msg) => Err(Error::Infeasible(msg)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{cost, exact_solve, gen_er, gen_tsp};
    use crate::rng::derive_rng;
    use rand::Rng as _;

    fn unit_square() -> TspInstance {
        TspInstance::new(
            "sq",
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        )
        .unwrap()
    }

    fn tsp_heatmap(n: usize, f: impl Fn(usize, usize) -> f64) -> Heatmap {
        let mut probs = vec![0.0; num_pairs(n)];
        for idx in 0..probs.len() {
            let (i, j) = pair_from_index(n, idx);
            probs[idx] = f(i, j);
        }
        Heatmap::new(ProblemKind::Tsp, n, probs).unwrap()
    }

    #[test]
    fn greedy_follows_perimeter_heatmap() {
        let inst = unit_square();
        let peri = [(0usize, 1usize), (1, 2), (2, 3), (0, 3)];
        let hm = tsp_heatmap(4, |i, j| if peri.contains(&(i, j)) { 0.9 } else { 0.1 });
        let sol = greedy_tsp_decode(&hm, &inst).unwrap();
        assert!((cost(&Instance::Tsp(inst), &sol).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_uniform_heatmap_is_deterministic() {
        let inst = gen_tsp(8, 1, 3).unwrap().remove(0);
        let hm = tsp_heatmap(8, |_, _| 0.5);
        let a = greedy_tsp_decode(&hm, &inst).unwrap();
        let b = greedy_tsp_decode(&hm, &inst).unwrap();
        assert_eq!(a, b);
        // With all ties, pair-index order forces edges (0,1), (0,2) first.
        assert!(a.has_edge(0, 1) && a.has_edge(0, 2));
    }

    #[test]
    fn greedy_reproduces_indicator_tour() {
        for seed in 0..5 {
            let inst = gen_tsp(9, 1, seed).unwrap().remove(0);
            let opt = exact_solve(&Instance::Tsp(inst.clone())).unwrap();
            let hm = Heatmap::indicator(&opt);
            let sol = greedy_tsp_decode(&hm, &inst).unwrap();
            assert_eq!(hamming(&sol, &opt).unwrap(), 0);
        }
    }

    #[test]
    fn nn_reproduces_indicator_tour() {
        for seed in 0..5 {
            let inst = gen_tsp(9, 1, 100 + seed).unwrap().remove(0);
            let opt = exact_solve(&Instance::Tsp(inst.clone())).unwrap();
            let hm = Heatmap::indicator(&opt);
            let sol = nn_tsp_decode(&hm, &inst).unwrap();
            assert_eq!(hamming(&sol, &opt).unwrap(), 0);
        }
    }

    #[test]
    fn nn_equal_probs_visits_in_index_order() {
        let inst = gen_tsp(6, 1, 0).unwrap().remove(0);
        let hm = tsp_heatmap(6, |_, _| 0.4);
        let sol = nn_tsp_decode(&hm, &inst).unwrap();
        let expect = Solution::from_tour(6, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(sol, expect);
    }

    #[test]
    fn mis_decode_traces() {
        let tri = MisInstance::new("k3", 3, vec![(0, 1), (1, 2), (0, 2)]).unwrap();
        let hm = Heatmap::new(ProblemKind::Mis, 3, vec![0.9, 0.5, 0.1]).unwrap();
        let sol = greedy_mis_decode(&hm, &tri).unwrap();
        assert_eq!(sol.bits, vec![1, 0, 0]);
        assert_eq!(cost(&Instance::Mis(tri), &sol).unwrap(), -1.0);

        let path = MisInstance::new("p3", 3, vec![(0, 1), (1, 2)]).unwrap();
        let mid = Heatmap::new(ProblemKind::Mis, 3, vec![0.6, 0.9, 0.6]).unwrap();
        assert_eq!(greedy_mis_decode(&mid, &path).unwrap().bits, vec![0, 1, 0]);
        let ends = Heatmap::new(ProblemKind::Mis, 3, vec![0.9, 0.6, 0.8]).unwrap();
        assert_eq!(greedy_mis_decode(&ends, &path).unwrap().bits, vec![1, 0, 1]);
    }

    #[test]
    fn mis_decode_selects_all_on_edgeless_graph() {
        let g = MisInstance::new("e5", 5, vec![]).unwrap();
        let hm = Heatmap::new(ProblemKind::Mis, 5, vec![0.0; 5]).unwrap();
        let sol = greedy_mis_decode(&hm, &g).unwrap();
        assert_eq!(sol.bits, vec![1; 5]);
    }

    #[test]
    fn two_opt_uncrosses_square() {
        let inst = unit_square();
        let crossing = Solution::from_tour(4, &[0, 2, 1, 3]).unwrap();
        let before = cost(&Instance::Tsp(inst.clone()), &crossing).unwrap();
        assert!((before - (2.0 + 2.0 * std::f64::consts::SQRT_2)).abs() < 1e-12);
        let fixed = two_opt(&inst, &crossing, usize::MAX).unwrap();
        let after = cost(&Instance::Tsp(inst), &fixed).unwrap();
        assert!((after - 4.0).abs() < 1e-12);
    }

    #[test]
    fn two_opt_leaves_optimum_unchanged() {
        let inst = gen_tsp(8, 1, 17).unwrap().remove(0);
        let opt = exact_solve(&Instance::Tsp(inst.clone())).unwrap();
        let refined = two_opt(&inst, &opt, usize::MAX).unwrap();
        assert_eq!(refined, opt);
    }

    #[test]
    fn two_opt_never_beats_exact_optimum() {
        for seed in 0..20 {
            let inst = gen_tsp(9, 1, 200 + seed).unwrap().remove(0);
            let wrapped = Instance::Tsp(inst.clone());
            let opt_cost = cost(&wrapped, &exact_solve(&wrapped).unwrap()).unwrap();
            let mut rng = derive_rng(seed, &[1]);
            let mut order: Vec<usize> = (0..9).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let start = Solution::from_tour(9, &order).unwrap();
            let refined = two_opt(&inst, &start, usize::MAX).unwrap();
            let c = cost(&wrapped, &refined).unwrap();
            assert!(c >= opt_cost - 1e-9, "2-opt {c} beat oracle {opt_cost}");
        }
    }

    #[test]
    fn two_opt_rejects_infeasible_input() {
        let inst = unit_square();
        let bad = Solution::new(ProblemKind::Tsp, 4, vec![1, 0, 0, 0, 0, 0]).unwrap();
        assert!(two_opt(&inst, &bad, 10).is_err());
    }

    #[test]
    fn hamming_basics() {
        let a = Solution::from_tour(4, &[0, 1, 2, 3]).unwrap();
        assert_eq!(hamming(&a, &a).unwrap(), 0);
        // Tours 0-1-2-3 and 0-2-1-3 share undirected edges {1,2} and {0,3},
        // so the halved symmetric difference is n - k = 4 - 2.
        let b = Solution::from_tour(4, &[0, 2, 1, 3]).unwrap();
        let shared: usize = a.bits.iter().zip(&b.bits).filter(|(x, y)| **x == 1 && **y == 1).count();
        assert_eq!(shared, 2);
        assert_eq!(hamming(&a, &b).unwrap(), 4 - shared);

        let m1 = Solution::new(ProblemKind::Mis, 3, vec![1, 0, 1]).unwrap();
        let m2 = Solution::new(ProblemKind::Mis, 3, vec![1, 1, 0]).unwrap();
        assert_eq!(hamming(&m1, &m2).unwrap(), 2);
        assert!(hamming(&a, &m1).is_err());
    }

    #[test]
    fn four_node_tours_sharing_two_edges_differ_by_two() {
        // 0-1-2-3 and 0-1-3-2 share undirected edges {0,1} and {2,3}.
        let a = Solution::from_tour(4, &[0, 1, 2, 3]).unwrap();
        let b = Solution::from_tour(4, &[0, 1, 3, 2]).unwrap();
        assert_eq!(hamming(&a, &b).unwrap(), 2);
    }

    #[test]
    fn decoder_fuzz_small() {
        let mut rng = derive_rng(99, &[]);
        for k in 0..300 {
            let n = 5 + (k % 12);
            let inst = gen_tsp(n, 1, 1000 + k as u64).unwrap().remove(0);
            let probs: Vec<f64> = (0..num_pairs(n)).map(|_| rng.gen::<f64>()).collect();
            let hm = Heatmap::new(ProblemKind::Tsp, n, probs).unwrap();
            let g = greedy_tsp_decode(&hm, &inst).unwrap();
            let nnd = nn_tsp_decode(&hm, &inst).unwrap();
            let wrapped = Instance::Tsp(inst.clone());
            assert_feasible(&wrapped, &g).unwrap();
            assert_feasible(&wrapped, &nnd).unwrap();
            let refined = two_opt(&inst, &g, usize::MAX).unwrap();
            assert_feasible(&wrapped, &refined).unwrap();
            assert!(cost(&wrapped, &refined).unwrap() <= cost(&wrapped, &g).unwrap() + 1e-12);
            // Idempotent once converged.
            let again = two_opt(&inst, &refined, usize::MAX).unwrap();
            assert_eq!(again, refined);
        }
        for k in 0..300u64 {
            let n = 1 + (k as usize % 20);
            let inst = gen_er(n, 0.3, 1, 2000 + k).unwrap().remove(0);
            let probs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let hm = Heatmap::new(ProblemKind::Mis, n, probs).unwrap();
            let sol = greedy_mis_decode(&hm, &inst).unwrap();
            assert_feasible(&Instance::Mis(inst.clone()), &sol).unwrap();
            // Maximality: every unselected vertex has a selected neighbor.
            let adj = inst.adjacency();
            for v in 0..n {
                if sol.bits[v] == 0 {
                    assert!(adj[v].iter().any(|&u| sol.bits[u as usize] == 1));
                }
            }
        }
    }

    #[test]
    fn heatmap_dense_roundtrip_and_symmetry_check() {
        let hm = tsp_heatmap(5, |i, j| (i + j) as f64 / 10.0);
        let dense = hm.to_dense_tsp();
        let back = Heatmap::from_dense_tsp(5, &dense).unwrap();
        assert_eq!(hm, back);
        let mut bad = dense.clone();
        bad[1] += 1e-6; // (0,1) now differs from (1,0)
        assert!(Heatmap::from_dense_tsp(5, &bad).is_err());
    }
}
