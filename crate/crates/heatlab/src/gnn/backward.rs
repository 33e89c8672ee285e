//! Reverse-mode differentiation of the forward pass, respecting the
//! fine-tuning mask: full layers accumulate base-weight gradients, adapter
//! layers accumulate only the low-rank factor gradients, frozen layers none.
//! Input gradients always propagate through every layer.

use super::forward::{BnTrace, Tape, BN_EPS};
use super::{FinetuneMask, GnnGrads, GnnParams, LayerMode, LoraAdapters, SegId};
use crate::error::{Error, Result};
use crate::instances::ProblemKind;
use ndarray::Array2;

fn colsum(x: &Array2<f64>) -> Vec<f64> {
    let mut out = vec![0.0; x.ncols()];
    for row in x.rows() {
        for (c, v) in row.iter().enumerate() {
            out[c] += v;
        }
    }
    out
}

struct Ctx<'a> {
    params: &'a GnnParams,
    adapters: Option<&'a LoraAdapters>,
    modes: Vec<LayerMode>,
    grads: GnnGrads,
}

impl Ctx<'_> {
    fn add_main(&mut self, seg: SegId, values: &Array2<f64>) {
        let spec = &self.params.layout.specs[seg];
        let dst = &mut self.grads.main[spec.offset..spec.offset + spec.len()];
        for (d, v) in dst.iter_mut().zip(values.iter()) {
            *d += v;
        }
    }

    fn add_main_vec(&mut self, seg: SegId, values: &[f64]) {
        let spec = &self.params.layout.specs[seg];
        let dst = &mut self.grads.main[spec.offset..spec.offset + spec.len()];
        for (d, v) in dst.iter_mut().zip(values) {
            *d += v;
        }
    }

    /// Backward through y = x @ W^T (+ adapter). Returns dx and accumulates
    /// weight gradients according to the segment's mask mode.
    fn linear_bwd(&mut self, w_seg: SegId, b_seg: Option<SegId>, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let w = self.params.mat(w_seg);
        let mut dx = dy.dot(&w);
        if let Some(ad) = self.adapters {
            if let Some(k) = ad.index_of(w_seg) {
                let (a, b) = ad.factors(&self.params.layout, k);
                let dya = dy.dot(&a);
                dx.scaled_add(ad.scaling, &dya.dot(&b));
            }
        }
        match self.modes[w_seg] {
            LayerMode::Full => {
                let dw = dy.t().dot(x);
                self.add_main(w_seg, &dw);
                if let Some(bs) = b_seg {
                    let db = colsum(dy);
                    self.add_main_vec(bs, &db);
                }
            }
            LayerMode::Lora => {
                let mut pending: Option<(usize, Array2<f64>, Array2<f64>, usize, usize)> = None;
                if let Some(ad) = self.adapters {
                    if let Some(k) = ad.index_of(w_seg) {
                        let (a, b) = ad.factors(&self.params.layout, k);
                        let xb = x.dot(&b.t());
                        let da = dy.t().dot(&xb) * ad.scaling;
                        let dya = dy.dot(&a);
                        let db = dya.t().dot(x) * ad.scaling;
                        let (_, a_off, b_off) = ad.segs[k];
                        pending = Some((k, da, db, a_off, b_off));
                    }
                }
                if let Some((_, da, db, a_off, b_off)) = pending {
                    for (slot, v) in self.grads.adapter[a_off..a_off + da.len()].iter_mut().zip(da.iter()) {
                        *slot += v;
                    }
                    for (slot, v) in self.grads.adapter[b_off..b_off + db.len()].iter_mut().zip(db.iter()) {
                        *slot += v;
                    }
                }
            }
            LayerMode::Frozen => {}
        }
        dx
    }

    /// Backward through batch norm; accumulates gamma/beta gradients when the
    /// owning layer trains in full.
    fn bn_bwd(
        &mut self,
        dy: &Array2<f64>,
        trace: &BnTrace,
        gamma_seg: SegId,
        beta_seg: SegId,
    ) -> Array2<f64> {
        let rows = dy.nrows();
        let d = dy.ncols();
        let gamma = self.params.vec(gamma_seg);
        if self.modes[gamma_seg] == LayerMode::Full {
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for r in 0..rows {
                for c in 0..d {
                    dgamma[c] += dy[(r, c)] * trace.xhat[(r, c)];
                    dbeta[c] += dy[(r, c)];
                }
            }
            self.add_main_vec(gamma_seg, &dgamma);
            self.add_main_vec(beta_seg, &dbeta);
        }
        let mut dx = Array2::zeros((rows, d));
        if trace.batch_stats {
            // Stats were computed from this batch, so they carry gradient.
            let nf = rows as f64;
            let mut sum_dxhat = vec![0.0; d];
            let mut sum_dxhat_xhat = vec![0.0; d];
            for r in 0..rows {
                for c in 0..d {
                    let dxh = dy[(r, c)] * gamma[c];
                    sum_dxhat[c] += dxh;
                    sum_dxhat_xhat[c] += dxh * trace.xhat[(r, c)];
                }
            }
            for r in 0..rows {
                for c in 0..d {
                    let inv = 1.0 / (trace.var[c] + BN_EPS).sqrt();
                    let dxh = dy[(r, c)] * gamma[c];
                    dx[(r, c)] = inv * (dxh - sum_dxhat[c] / nf - trace.xhat[(r, c)] * sum_dxhat_xhat[c] / nf);
                }
            }
        } else {
            for r in 0..rows {
                for c in 0..d {
                    let inv = 1.0 / (trace.var[c] + BN_EPS).sqrt();
                    dx[(r, c)] = dy[(r, c)] * gamma[c] * inv;
                }
            }
        }
        dx
    }
}

/// Backward from per-variable x0-probability gradients.
pub fn backward_from_x0prob(
    params: &GnnParams,
    adapters: Option<&LoraAdapters>,
    mask: &FinetuneMask,
    tape: &Tape,
    d_x0prob: &[f64],
) -> Result<GnnGrads> {
    if d_x0prob.len() != tape.x0_prob.len() {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient has {} entries, tape has {} variables",
            d_x0prob.len(),
            tape.x0_prob.len()
        )));
    }
    let rows = tape.logits.nrows();
    let mut dlogits = Array2::zeros((rows, 2));
    for row in 0..rows {
        let dp = match tape.kind {
            ProblemKind::Tsp => 0.5 * d_x0prob[tape.edges.var_of_edge[row] as usize],
            ProblemKind::Mis => d_x0prob[row],
        };
        let p = tape.probs1[row];
        let g = dp * p * (1.0 - p);
        dlogits[(row, 0)] = -g;
        dlogits[(row, 1)] = g;
    }
    backward_from_logits(params, adapters, mask, tape, &dlogits)
}

/// Backward from raw per-row logit gradients.
pub fn backward_from_logits(
    params: &GnnParams,
    adapters: Option<&LoraAdapters>,
    mask: &FinetuneMask,
    tape: &Tape,
    dlogits: &Array2<f64>,
) -> Result<GnnGrads> {
    let config = params.config();
    mask.validate(config.depth)?;
    if tape.layers.len() != config.depth {
        return Err(Error::DimensionMismatch(format!(
            "tape has {} layers, network has {}",
            tape.layers.len(),
            config.depth
        )));
    }
    if dlogits.dim() != tape.logits.dim() {
        return Err(Error::DimensionMismatch("logit gradient shape mismatch".into()));
    }
    let layout = params.layout.clone();
    let d = config.hidden;
    let n = tape.n;
    let m = tape.edges.src.len();

    let mut ctx = Ctx {
        params,
        adapters,
        modes: mask.seg_modes(&layout),
        grads: GnnGrads::zeros(params, adapters),
    };

    // Head.
    let dfinal = ctx.linear_bwd(layout.head_w, Some(layout.head_b), &tape.final_feat, dlogits);
    let (mut dh, mut de) = match config.kind {
        ProblemKind::Tsp => (Array2::zeros((n, d)), dfinal),
        ProblemKind::Mis => (dfinal, Array2::zeros((m, d))),
    };

    // Layers in reverse.
    for (l, trace) in tape.layers.iter().enumerate().rev() {
        let ids = &layout.layers[l];
        let dh_next = dh;
        let de_next = de;

        // Residual splits.
        let mut dh_in = dh_next.clone();
        let mut de_in = de_next.clone();

        // Node path: H_next = H_in + relu(hbn).
        let mut dhbn = dh_next;
        for (slot, &pre) in dhbn.iter_mut().zip(trace.hbn.iter()) {
            if pre <= 0.0 {
                *slot = 0.0;
            }
        }
        let ds = ctx.bn_bwd(&dhbn, &trace.bn_h, ids.bn_h_gamma, ids.bn_h_beta);

        // s = U h + sum gates * vh[dst] (scattered by src).
        let mut dgates = Array2::zeros((m, d));
        let mut dvh = Array2::zeros((n, d));
        {
            let ds_s = ds.as_slice().expect("standard layout");
            let g_s = trace.gates.as_slice().expect("standard layout");
            let vh_s = trace.vh.as_slice().expect("standard layout");
            let dg = dgates.as_slice_mut().expect("standard layout");
            let dv = dvh.as_slice_mut().expect("standard layout");
            for row in 0..m {
                let i = tape.edges.src[row] as usize;
                let j = tape.edges.dst[row] as usize;
                let dsi = &ds_s[i * d..(i + 1) * d];
                let g = &g_s[row * d..(row + 1) * d];
                let vj = &vh_s[j * d..(j + 1) * d];
                let dgr = &mut dg[row * d..(row + 1) * d];
                for c in 0..d {
                    dgr[c] = dsi[c] * vj[c];
                }
                let dvj = &mut dv[j * d..(j + 1) * d];
                for c in 0..d {
                    dvj[c] += g[c] * dsi[c];
                }
            }
        }
        dh_in += &ctx.linear_bwd(ids.u, None, &trace.h_in, &ds);
        dh_in += &ctx.linear_bwd(ids.v, None, &trace.h_in, &dvh);

        // Gate: gates = sigmoid(ehat).
        let mut dehat = dgates;
        for (slot, &g) in dehat.iter_mut().zip(trace.gates.iter()) {
            *slot *= g * (1.0 - g);
        }

        // Edge path: E_next = E_in + MLP_e(BN(ehat)) + MLP_t(temb).
        let dme = de_next;
        let dmt = Array2::from_shape_vec((1, d), colsum(&dme)).expect("shape");
        {
            // MLP_t: temb -> mh -> d, recompute the tiny intermediates.
            let ta_row = trace.t_a1.view().insert_axis(ndarray::Axis(0)).to_owned();
            let da1t = ctx.linear_bwd(ids.mlp_t_w2, Some(ids.mlp_t_b2), &ta_row, &dmt);
            let mut dzt = da1t;
            for (slot, &a) in dzt.iter_mut().zip(trace.t_a1.iter()) {
                if a <= 0.0 {
                    *slot = 0.0;
                }
            }
            let temb_row = tape.t_emb.view().insert_axis(ndarray::Axis(0)).to_owned();
            let _ = ctx.linear_bwd(ids.mlp_t_w1, Some(ids.mlp_t_b1), &temb_row, &dzt);
        }
        let da1 = ctx.linear_bwd(ids.mlp_e_w2, Some(ids.mlp_e_b2), &trace.a1_e, &dme);
        let mut dz1 = da1;
        for (slot, &a) in dz1.iter_mut().zip(trace.a1_e.iter()) {
            if a <= 0.0 {
                *slot = 0.0;
            }
        }
        let debn = ctx.linear_bwd(ids.mlp_e_w1, Some(ids.mlp_e_b1), &trace.ebn, &dz1);
        dehat += &ctx.bn_bwd(&debn, &trace.bn_e, ids.bn_e_gamma, ids.bn_e_beta);

        // ehat = P e + (Q h)[src] + (R h)[dst].
        de_in += &ctx.linear_bwd(ids.p, None, &trace.e_in, &dehat);
        let mut dqh = Array2::zeros((n, d));
        let mut drh = Array2::zeros((n, d));
        {
            let de_s = dehat.as_slice().expect("standard layout");
            let dq = dqh.as_slice_mut().expect("standard layout");
            let dr = drh.as_slice_mut().expect("standard layout");
            for row in 0..m {
                let i = tape.edges.src[row] as usize;
                let j = tape.edges.dst[row] as usize;
                let der = &de_s[row * d..(row + 1) * d];
                let dqi = &mut dq[i * d..(i + 1) * d];
                for c in 0..d {
                    dqi[c] += der[c];
                }
                let drj = &mut dr[j * d..(j + 1) * d];
                for c in 0..d {
                    drj[c] += der[c];
                }
            }
        }
        dh_in += &ctx.linear_bwd(ids.q, None, &trace.h_in, &dqh);
        dh_in += &ctx.linear_bwd(ids.r, None, &trace.h_in, &drh);

        dh = dh_in;
        de = de_in;
    }

    // Input embeddings.
    let embed_seg = layout.input_embed;
    let mut d_eff = Array2::zeros((2, d));
    match config.kind {
        ProblemKind::Tsp => {
            let _ = ctx.linear_bwd(
                layout.input_node_w.expect("tsp layout"),
                Some(layout.input_node_b.expect("tsp layout")),
                &tape.node_feats,
                &dh,
            );
            for (row, &var) in tape.edges.var_of_edge.iter().enumerate() {
                let bit = tape.xt_bits[var as usize] as usize;
                for c in 0..d {
                    d_eff[(bit, c)] += de[(row, c)];
                }
            }
        }
        ProblemKind::Mis => {
            for (row, &bit) in tape.xt_bits.iter().enumerate() {
                for c in 0..d {
                    d_eff[(bit as usize, c)] += dh[(row, c)];
                }
            }
        }
    }
    match ctx.modes[embed_seg] {
        LayerMode::Full => ctx.add_main(embed_seg, &d_eff),
        LayerMode::Lora => {
            let mut pending = None;
            if let Some(ad) = ctx.adapters {
                if let Some(k) = ad.index_of(embed_seg) {
                    let (a, b) = ad.factors(&layout, k);
                    let da = d_eff.dot(&b.t()) * ad.scaling;
                    let db = a.t().dot(&d_eff) * ad.scaling;
                    let (_, a_off, b_off) = ad.segs[k];
                    pending = Some((da, db, a_off, b_off));
                }
            }
            if let Some((da, db, a_off, b_off)) = pending {
                for (slot, v) in ctx.grads.adapter[a_off..a_off + da.len()].iter_mut().zip(da.iter()) {
                    *slot += v;
                }
                for (slot, v) in ctx.grads.adapter[b_off..b_off + db.len()].iter_mut().zip(db.iter()) {
                    *slot += v;
                }
            }
        }
        LayerMode::Frozen => {}
    }

    Ok(ctx.grads)
}
