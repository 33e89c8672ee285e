//! Forward pass of the edge-gated message-passing network.
//!
//! Per layer, with d-wide features h (nodes) and e (directed edges):
//!
//!   ehat_ij = P e_ij + Q h_i + R h_j
//!   e'_ij   = e_ij + MLP_e(BN(ehat_ij)) + MLP_t(temb)
//!   h'_i    = h_i + relu(BN(U h_i + sum_j sigmoid(ehat_ij) * V h_j))
//!
//! TSP embeds the noisy bits on edges and sinusoidal coordinate features on
//! nodes; MIS embeds the noisy bits on nodes and starts edges at zero. The
//! classification head reads final edge (TSP) or node (MIS) features and the
//! per-variable class-1 probabilities average the two directed copies of each
//! undirected pair.

use super::{GnnParams, LoraAdapters, SegId};
use crate::error::{Error, Result};
use crate::instances::{pair_index, Instance, ProblemKind};
use ndarray::{Array1, Array2};

pub(crate) const BN_EPS: f64 = 1e-5;

/// Batch-norm statistics source. Training uses batch statistics (falling back
/// to running averages when fewer than two rows are present); evaluation uses
/// running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Sinusoidal embedding of a timestep: interleaved sin/cos at geometric
/// frequencies with base 10000. Rejects odd widths.
pub fn timestep_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("timestep embedding width {dim} must be even and > 0")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = 10000f64.powf(-((2 * k) as f64) / dim as f64);
        let x = t as f64 * freq;
        out.push(x.sin());
        out.push(x.cos());
    }
    Ok(out)
}

/// Sinusoidal features of unit-square coordinates: per coordinate, sin/cos at
/// frequencies pi * 2^k for k < freqs.
fn coord_features(coords: &[[f64; 2]], freqs: usize) -> Array2<f64> {
    let n = coords.len();
    let mut out = Array2::zeros((n, 4 * freqs));
    for (i, c) in coords.iter().enumerate() {
        let mut col = 0;
        for &value in c {
            for k in 0..freqs {
                let w = std::f64::consts::PI * (1 << k) as f64;
                out[(i, col)] = (w * value).sin();
                out[(i, col + 1)] = (w * value).cos();
                col += 2;
            }
        }
    }
    out
}

/// Directed edge lists: all ordered pairs for TSP, both directions of each
/// graph edge for MIS. `var_of_edge` maps a TSP edge to its undirected pair
/// variable.
pub(crate) struct EdgeIndex {
    pub src: Vec<u32>,
    pub dst: Vec<u32>,
    pub var_of_edge: Vec<u32>,
}

pub(crate) fn edge_index(instance: &Instance) -> EdgeIndex {
    match instance {
        Instance::Tsp(t) => {
            let n = t.n();
            let m = n * (n - 1);
            let mut src = Vec::with_capacity(m);
            let mut dst = Vec::with_capacity(m);
            let mut var_of_edge = Vec::with_capacity(m);
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    src.push(i as u32);
                    dst.push(j as u32);
                    var_of_edge.push(pair_index(n, i, j) as u32);
                }
            }
            EdgeIndex { src, dst, var_of_edge }
        }
        Instance::Mis(m) => {
            let adj = m.adjacency();
            let mut src = Vec::new();
            let mut dst = Vec::new();
            for (u, nbrs) in adj.iter().enumerate() {
                for &v in nbrs {
                    src.push(u as u32);
                    dst.push(v);
                }
            }
            EdgeIndex {
                src,
                dst,
                var_of_edge: Vec::new(),
            }
        }
    }
}

/// Batch-norm forward trace.
#[derive(Debug, Clone)]
pub(crate) struct BnTrace {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub xhat: Array2<f64>,
    /// Whether the statistics came from the batch (true) or the running
    /// averages (false).
    pub batch_stats: bool,
}

fn bn_forward(
    x: &Array2<f64>,
    gamma: &[f64],
    beta: &[f64],
    run_mean: &[f64],
    run_var: &[f64],
    mode: BnMode,
) -> (Array2<f64>, BnTrace) {
    let rows = x.nrows();
    let d = x.ncols();
    let batch_stats = mode == BnMode::Train && rows >= 2;
    let (mean, var) = if batch_stats {
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for row in x.rows() {
            for (c, &v) in row.iter().enumerate() {
                mean[c] += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= rows as f64;
        }
        for row in x.rows() {
            for (c, &v) in row.iter().enumerate() {
                var[c] += (v - mean[c]) * (v - mean[c]);
            }
        }
        for v in var.iter_mut() {
            *v /= rows as f64;
        }
        (mean, var)
    } else {
        (run_mean.to_vec(), run_var.to_vec())
    };
    let mut xhat = Array2::zeros((rows, d));
    let mut y = Array2::zeros((rows, d));
    for r in 0..rows {
        for c in 0..d {
            let inv = 1.0 / (var[c] + BN_EPS).sqrt();
            let xh = (x[(r, c)] - mean[c]) * inv;
            xhat[(r, c)] = xh;
            y[(r, c)] = gamma[c] * xh + beta[c];
        }
    }
    (
        y,
        BnTrace {
            mean,
            var,
            xhat,
            batch_stats,
        },
    )
}

/// Applies x @ W^T with the adapter delta when one is attached to `seg`.
pub(crate) fn apply_mat(
    params: &GnnParams,
    adapters: Option<&LoraAdapters>,
    seg: SegId,
    x: &Array2<f64>,
) -> Array2<f64> {
    let w = params.mat(seg);
    let mut y = x.dot(&w.t());
    if let Some(ad) = adapters {
        if let Some(k) = ad.index_of(seg) {
            let (a, b) = ad.factors(&params.layout, k);
            let xb = x.dot(&b.t());
            y.scaled_add(ad.scaling, &xb.dot(&a.t()));
        }
    }
    y
}

/// Effective embedding table (base + adapter delta); tiny, so it is merged
/// eagerly.
pub(crate) fn effective_embed(params: &GnnParams, adapters: Option<&LoraAdapters>) -> Array2<f64> {
    let seg = params.layout.input_embed;
    let mut table = params.mat(seg).to_owned();
    if let Some(ad) = adapters {
        if let Some(k) = ad.index_of(seg) {
            let (a, b) = ad.factors(&params.layout, k);
            table.scaled_add(ad.scaling, &a.dot(&b));
        }
    }
    table
}

fn add_bias_rows(y: &mut Array2<f64>, bias: &[f64]) {
    for mut row in y.rows_mut() {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Per-layer forward trace.
#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    pub h_in: Array2<f64>,
    pub e_in: Array2<f64>,
    pub bn_e: BnTrace,
    pub ebn: Array2<f64>,
    pub a1_e: Array2<f64>,
    pub t_a1: Array1<f64>,
    pub gates: Array2<f64>,
    pub vh: Array2<f64>,
    pub bn_h: BnTrace,
    pub hbn: Array2<f64>,
}

/// Everything the backward pass needs to replay a forward call.
#[derive(Debug, Clone)]
pub struct Tape {
    pub(crate) kind: ProblemKind,
    pub(crate) n: usize,
    pub t: usize,
    pub(crate) t_emb: Array1<f64>,
    pub(crate) node_feats: Array2<f64>,
    pub(crate) xt_bits: Vec<u8>,
    pub(crate) edges: EdgeIndex,
    pub(crate) layers: Vec<LayerTrace>,
    pub(crate) final_feat: Array2<f64>,
    /// Per-row 2-class logits (edge rows for TSP, node rows for MIS).
    pub logits: Array2<f64>,
    /// Per-row softmax probability of class 1.
    pub probs1: Vec<f64>,
    /// Per-variable class-1 probability (directed copies averaged for TSP).
    pub x0_prob: Vec<f64>,
}

impl std::fmt::Debug for EdgeIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EdgeIndex")
            .field("edges", &self.src.len())
            .finish()
    }
}

impl Clone for EdgeIndex {
    fn clone(&self) -> Self {
        EdgeIndex {
            src: self.src.clone(),
            dst: self.dst.clone(),
            var_of_edge: self.var_of_edge.clone(),
        }
    }
}

fn check_finite(name: &str, layer: usize, x: &Array2<f64>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite activation in {name} at layer {layer}"
        )));
    }
    Ok(())
}

/// Runs the network on a noisy state, producing per-variable class-1
/// probabilities for the clean solution plus the tape for backward.
pub fn forward(
    params: &GnnParams,
    adapters: Option<&LoraAdapters>,
    instance: &Instance,
    xt_bits: &[u8],
    t: usize,
    mode: BnMode,
) -> Result<(Vec<f64>, Tape)> {
    let config = params.config();
    if config.kind != instance.kind() {
        return Err(Error::DimensionMismatch(format!(
            "network is for {} but instance is {}",
            config.kind,
            instance.kind()
        )));
    }
    let num_vars = instance.num_vars();
    if xt_bits.len() != num_vars {
        return Err(Error::DimensionMismatch(format!(
            "noisy state has {} bits, instance has {num_vars} variables",
            xt_bits.len()
        )));
    }
    let n = instance.n();
    let d = config.hidden;
    let layout = params.layout.clone();
    let edges = edge_index(instance);
    let m = edges.src.len();

    let t_emb = Array1::from(timestep_embed(t, config.timestep_embed_dim)?);
    let embed = effective_embed(params, adapters);

    // Input features.
    let (node_feats, mut h, mut e) = match instance {
        Instance::Tsp(tsp) => {
            let feats = coord_features(&tsp.coords, config.coord_freqs);
            let mut h = apply_mat(
                params,
                adapters,
                layout.input_node_w.expect("tsp layout has a node projection"),
                &feats,
            );
            add_bias_rows(&mut h, params.vec(layout.input_node_b.expect("tsp layout")));
            let mut e = Array2::zeros((m, d));
            for (row, &var) in edges.var_of_edge.iter().enumerate() {
                let bit = xt_bits[var as usize] as usize;
                for c in 0..d {
                    e[(row, c)] = embed[(bit, c)];
                }
            }
            (feats, h, e)
        }
        Instance::Mis(_) => {
            let mut h = Array2::zeros((n, d));
            for (row, &bit) in xt_bits.iter().enumerate() {
                for c in 0..d {
                    h[(row, c)] = embed[(bit as usize, c)];
                }
            }
            (Array2::zeros((0, 0)), h, Array2::zeros((m, d)))
        }
    };

    let mut layers = Vec::with_capacity(config.depth);
    for (l, ids) in layout.layers.iter().enumerate() {
        let h_in = h.clone();
        let e_in = e.clone();

        // ehat = P e + (Q h)[src] + (R h)[dst]
        let qh = apply_mat(params, adapters, ids.q, &h);
        let rh = apply_mat(params, adapters, ids.r, &h);
        let mut ehat = apply_mat(params, adapters, ids.p, &e);
        {
            let qh_s = qh.as_slice().expect("standard layout");
            let rh_s = rh.as_slice().expect("standard layout");
            let eh = ehat.as_slice_mut().expect("standard layout");
            for row in 0..m {
                let i = edges.src[row] as usize;
                let j = edges.dst[row] as usize;
                let out = &mut eh[row * d..(row + 1) * d];
                let qi = &qh_s[i * d..(i + 1) * d];
                let rj = &rh_s[j * d..(j + 1) * d];
                for c in 0..d {
                    out[c] += qi[c] + rj[c];
                }
            }
        }
        check_finite("edge pre-activation", l, &ehat)?;

        // Edge path: residual + MLP_e(BN(ehat)) + MLP_t(temb).
        let (run_mean_e, run_var_e) = params.bn_run(ids.bn_e_run);
        let (ebn, bn_e) = bn_forward(
            &ehat,
            params.vec(ids.bn_e_gamma),
            params.vec(ids.bn_e_beta),
            run_mean_e,
            run_var_e,
            mode,
        );
        let mut z1 = apply_mat(params, adapters, ids.mlp_e_w1, &ebn);
        add_bias_rows(&mut z1, params.vec(ids.mlp_e_b1));
        let a1_e = z1.mapv(|x| x.max(0.0));
        let mut me = apply_mat(params, adapters, ids.mlp_e_w2, &a1_e);
        add_bias_rows(&mut me, params.vec(ids.mlp_e_b2));

        let temb_row = t_emb.view().insert_axis(ndarray::Axis(0)).to_owned();
        let mut zt = apply_mat(params, adapters, ids.mlp_t_w1, &temb_row);
        add_bias_rows(&mut zt, params.vec(ids.mlp_t_b1));
        let t_a1 = zt.row(0).mapv(|x| x.max(0.0));
        let ta_row = t_a1.view().insert_axis(ndarray::Axis(0)).to_owned();
        let mut mt = apply_mat(params, adapters, ids.mlp_t_w2, &ta_row);
        add_bias_rows(&mut mt, params.vec(ids.mlp_t_b2));
        let mt_row = mt.row(0).to_owned();

        let mut e_next = e_in.clone() + &me;
        add_bias_rows(&mut e_next, mt_row.as_slice().expect("standard layout"));
        check_finite("edge features", l, &e_next)?;

        // Node path: residual + relu(BN(U h + sum_j sigmoid(ehat) * V h_j)).
        let gates = ehat.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let vh = apply_mat(params, adapters, ids.v, &h);
        let mut s = apply_mat(params, adapters, ids.u, &h);
        {
            let g_s = gates.as_slice().expect("standard layout");
            let vh_s = vh.as_slice().expect("standard layout");
            let s_m = s.as_slice_mut().expect("standard layout");
            for row in 0..m {
                let i = edges.src[row] as usize;
                let j = edges.dst[row] as usize;
                let out = &mut s_m[i * d..(i + 1) * d];
                let g = &g_s[row * d..(row + 1) * d];
                let vj = &vh_s[j * d..(j + 1) * d];
                for c in 0..d {
                    out[c] += g[c] * vj[c];
                }
            }
        }
        let (run_mean_h, run_var_h) = params.bn_run(ids.bn_h_run);
        let (hbn, bn_h) = bn_forward(
            &s,
            params.vec(ids.bn_h_gamma),
            params.vec(ids.bn_h_beta),
            run_mean_h,
            run_var_h,
            mode,
        );
        let h_next = h_in.clone() + &hbn.mapv(|x| x.max(0.0));
        check_finite("node features", l, &h_next)?;

        layers.push(LayerTrace {
            h_in,
            e_in,
            bn_e,
            ebn,
            a1_e,
            t_a1,
            gates,
            vh,
            bn_h,
            hbn,
        });
        h = h_next;
        e = e_next;
    }

    // Classification head on the features that carry the variables.
    let final_feat = match config.kind {
        ProblemKind::Tsp => e.clone(),
        ProblemKind::Mis => h.clone(),
    };
    let mut logits = apply_mat(params, adapters, layout.head_w, &final_feat);
    add_bias_rows(&mut logits, params.vec(layout.head_b));
    check_finite("head logits", config.depth, &logits)?;

    let probs1: Vec<f64> = logits
        .rows()
        .into_iter()
        .map(|r| 1.0 / (1.0 + (r[0] - r[1]).exp()))
        .collect();
    let x0_prob = match config.kind {
        ProblemKind::Tsp => {
            let mut acc = vec![0.0; num_vars];
            for (row, &var) in edges.var_of_edge.iter().enumerate() {
                acc[var as usize] += 0.5 * probs1[row];
            }
            acc
        }
        ProblemKind::Mis => probs1.clone(),
    };

    let tape = Tape {
        kind: config.kind,
        n,
        t,
        t_emb,
        node_feats,
        xt_bits: xt_bits.to_vec(),
        edges,
        layers,
        final_feat,
        logits,
        probs1,
        x0_prob: x0_prob.clone(),
    };
    Ok((x0_prob, tape))
}

impl Tape {
    /// Smallest absolute pre-activation over every relu in the recorded
    /// forward. Finite-difference checks are only meaningful when this margin
    /// comfortably exceeds the probe step, since central differences straddle
    /// the kink otherwise.
    pub fn relu_margin(&self, params: &GnnParams, adapters: Option<&LoraAdapters>) -> f64 {
        let layout = params.layout.clone();
        let mut margin = f64::INFINITY;
        for (trace, ids) in self.layers.iter().zip(&layout.layers) {
            let mut z1 = apply_mat(params, adapters, ids.mlp_e_w1, &trace.ebn);
            add_bias_rows(&mut z1, params.vec(ids.mlp_e_b1));
            for v in z1.iter() {
                margin = margin.min(v.abs());
            }
            let temb_row = self.t_emb.view().insert_axis(ndarray::Axis(0)).to_owned();
            let mut zt = apply_mat(params, adapters, ids.mlp_t_w1, &temb_row);
            add_bias_rows(&mut zt, params.vec(ids.mlp_t_b1));
            for v in zt.iter() {
                margin = margin.min(v.abs());
            }
            for v in trace.hbn.iter() {
                margin = margin.min(v.abs());
            }
        }
        margin
    }
}

/// Folds batch statistics recorded on a tape into the running averages.
pub fn update_bn_running(params: &mut GnnParams, tape: &Tape, momentum: f64) {
    let d = params.layout.config.hidden;
    let layer_ids: Vec<(usize, usize)> = params
        .layout
        .layers
        .iter()
        .map(|ids| (ids.bn_e_run, ids.bn_h_run))
        .collect();
    for (trace, (e_run, h_run)) in tape.layers.iter().zip(layer_ids) {
        for (bn, run) in [(&trace.bn_e, e_run), (&trace.bn_h, h_run)] {
            if !bn.batch_stats {
                continue;
            }
            for c in 0..d {
                let mslot = run + c;
                let vslot = run + d + c;
                params.bn_running[mslot] = (1.0 - momentum) * params.bn_running[mslot] + momentum * bn.mean[c];
                params.bn_running[vslot] = (1.0 - momentum) * params.bn_running[vslot] + momentum * bn.var[c];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::{FinetuneMask, GnnConfig, LoraAdapters, PolicySnapshot};
    use crate::instances::{gen_er, gen_tsp, num_pairs, pair_index};
    use crate::rng::derive_rng;
    use rand::Rng as _;

    fn tsp_setup(depth: usize, hidden: usize, n: usize, seed: u64) -> (PolicySnapshot, Instance, Vec<u8>) {
        let cfg = GnnConfig::new(ProblemKind::Tsp, depth, hidden).unwrap();
        let policy = PolicySnapshot::new(&cfg, seed).unwrap();
        let inst = Instance::Tsp(gen_tsp(n, 1, seed).unwrap().remove(0));
        let mut rng = derive_rng(seed, &[7]);
        let bits: Vec<u8> = (0..inst.num_vars()).map(|_| rng.gen_range(0..2u8)).collect();
        (policy, inst, bits)
    }

    #[test]
    fn timestep_embed_basics() {
        let z = timestep_embed(0, 8).unwrap();
        for (i, v) in z.iter().enumerate() {
            if i % 2 == 0 {
                assert_eq!(*v, 0.0);
            } else {
                assert_eq!(*v, 1.0);
            }
        }
        assert!(timestep_embed(1, 7).is_err());
        let e = timestep_embed(12345, 16).unwrap();
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn timestep_embed_has_no_collisions() {
        let mut seen: Vec<Vec<u64>> = (0..=10_000usize)
            .map(|t| {
                timestep_embed(t, 8)
                    .unwrap()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect();
        seen.sort();
        for w in seen.windows(2) {
            assert_ne!(w[0], w[1]);
        }
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let (policy, inst, bits) = tsp_setup(2, 8, 6, 3);
        let (p1, _) = forward(&policy.params, None, &inst, &bits, 5, BnMode::Train).unwrap();
        let (p2, _) = forward(&policy.params, None, &inst, &bits, 5, BnMode::Train).unwrap();
        assert_eq!(p1, p2);
        assert!(p1.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn zero_depth_applies_head_to_embeddings() {
        let (policy, inst, bits) = tsp_setup(0, 8, 5, 1);
        let (probs, tape) = forward(&policy.params, None, &inst, &bits, 1, BnMode::Eval).unwrap();
        assert_eq!(probs.len(), num_pairs(5));
        assert_eq!(tape.layers.len(), 0);
        // With no message passing, the logits depend only on the edge bit, so
        // every pair with the same bit gets the same probability.
        let mut by_bit = [None::<f64>; 2];
        for (v, p) in probs.iter().enumerate() {
            let b = bits[v] as usize;
            match by_bit[b] {
                None => by_bit[b] = Some(*p),
                Some(expect) => assert!((p - expect).abs() < 1e-12),
            }
        }
    }

    #[test]
    fn fresh_adapters_do_not_change_outputs() {
        let (policy, inst, bits) = tsp_setup(2, 8, 6, 9);
        let hybrid = policy.clone().into_hybrid(2, 1.0, 1, 11).unwrap();
        let (base, _) = forward(&policy.params, None, &inst, &bits, 3, BnMode::Train).unwrap();
        let (with, _) = forward(
            &hybrid.params,
            hybrid.adapters.as_ref(),
            &inst,
            &bits,
            3,
            BnMode::Train,
        )
        .unwrap();
        assert_eq!(base, with);
    }

    #[test]
    fn adapter_path_matches_merged_weights() {
        let (policy, inst, bits) = tsp_setup(2, 8, 6, 21);
        let mut hybrid = policy.into_hybrid(2, 0.7, 1, 13).unwrap();
        // Give the B factors nonzero values so the delta is real.
        let mut rng = derive_rng(5, &[]);
        if let Some(ad) = hybrid.adapters.as_mut() {
            for x in ad.data.iter_mut() {
                *x = rng.gen::<f64>() - 0.5;
            }
        }
        let (split, _) = forward(
            &hybrid.params,
            hybrid.adapters.as_ref(),
            &inst,
            &bits,
            4,
            BnMode::Eval,
        )
        .unwrap();
        let merged = hybrid.merged_params();
        let (folded, _) = forward(&merged, None, &inst, &bits, 4, BnMode::Eval).unwrap();
        for (a, b) in split.iter().zip(&folded) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn permutation_equivariance_tsp() {
        let (policy, inst, bits) = tsp_setup(3, 8, 6, 33);
        let tsp = inst.as_tsp().unwrap();
        let n = tsp.n();
        let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];
        let permuted_coords: Vec<[f64; 2]> = {
            let mut c = vec![[0.0; 2]; n];
            for (i, &pi) in perm.iter().enumerate() {
                c[pi] = tsp.coords[i];
            }
            c
        };
        let perm_inst = Instance::Tsp(
            crate::instances::TspInstance::new("perm", permuted_coords).unwrap(),
        );
        let mut perm_bits = vec![0u8; bits.len()];
        for i in 0..n {
            for j in (i + 1)..n {
                perm_bits[pair_index(n, perm[i], perm[j])] = bits[pair_index(n, i, j)];
            }
        }
        let (base, _) = forward(&policy.params, None, &inst, &bits, 2, BnMode::Train).unwrap();
        let (permuted, _) = forward(&policy.params, None, &perm_inst, &perm_bits, 2, BnMode::Train).unwrap();
        for i in 0..n {
            for j in (i + 1)..n {
                let a = base[pair_index(n, i, j)];
                let b = permuted[pair_index(n, perm[i], perm[j])];
                assert!((a - b).abs() < 1e-9, "pair ({i},{j}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn init_logits_are_bounded() {
        let cfg = GnnConfig::new(ProblemKind::Tsp, 3, 16).unwrap();
        let mut worst = 0.0f64;
        for seed in 0..50 {
            let policy = PolicySnapshot::new(&cfg, seed).unwrap();
            for k in 0..20 {
                let inst = Instance::Tsp(gen_tsp(6, 1, seed * 100 + k).unwrap().remove(0));
                let mut rng = derive_rng(seed, &[k]);
                let bits: Vec<u8> = (0..inst.num_vars()).map(|_| rng.gen_range(0..2u8)).collect();
                let (_, tape) = forward(&policy.params, None, &inst, &bits, 10, BnMode::Train).unwrap();
                for &l in tape.logits.iter() {
                    worst = worst.max(l.abs());
                }
            }
        }
        assert!(worst < 10.0, "init logit magnitude {worst}");
    }

    #[test]
    fn mis_forward_handles_edgeless_graphs() {
        let cfg = GnnConfig::new(ProblemKind::Mis, 2, 8).unwrap();
        let policy = PolicySnapshot::new(&cfg, 2).unwrap();
        let inst = Instance::Mis(gen_er(5, 0.0, 1, 1).unwrap().remove(0));
        let bits = vec![1, 0, 1, 0, 1];
        let (probs, _) = forward(&policy.params, None, &inst, &bits, 3, BnMode::Train).unwrap();
        assert_eq!(probs.len(), 5);
        assert!(probs.iter().all(|p| p.is_finite()));
        // Single-vertex graph exercises the batch-size-1 running-stat fallback.
        let one = Instance::Mis(crate::instances::MisInstance::new("v1", 1, vec![]).unwrap());
        let (p, _) = forward(&policy.params, None, &one, &[1], 2, BnMode::Train).unwrap();
        assert!(p[0].is_finite());
    }

    #[test]
    fn bn_running_update_moves_stats() {
        let (mut policy, inst, bits) = tsp_setup(1, 8, 6, 40);
        let before = policy.params.bn_running.clone();
        let (_, tape) = forward(&policy.params, None, &inst, &bits, 2, BnMode::Train).unwrap();
        update_bn_running(&mut policy.params, &tape, 0.1);
        assert_ne!(before, policy.params.bn_running);
    }

    #[test]
    fn mask_consistency_checked_by_construction() {
        let cfg = GnnConfig::new(ProblemKind::Tsp, 3, 8).unwrap();
        let layout = crate::gnn::ParamLayout::build(&cfg);
        let mask = FinetuneMask::all_frozen(3);
        let ad = LoraAdapters::new(&layout, &mask, 2, 1.0, 0).unwrap();
        assert!(ad.segs.is_empty());
    }
}
