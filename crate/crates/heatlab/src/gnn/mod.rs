//! Anisotropic edge-gated message-passing network over instance graphs:
//! parameter store, low-rank adapters, fine-tuning masks, forward/backward,
//! optimizer and checkpointing.
//!
//! Parameters live in one flat f64 buffer described by a named segment
//! layout. That keeps finite-difference checks, Adam, adapter merging and
//! serialization trivial, while forward code reads typed 2-D views.

mod backward;
mod checkpoint;
mod forward;
mod optimizer;

pub use backward::{backward_from_logits, backward_from_x0prob};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use forward::{forward, timestep_embed, update_bn_running, BnMode, Tape};
pub use optimizer::{apply_update, AdamState};

use crate::error::{Error, Result};
use crate::instances::ProblemKind;
use crate::rng::derive_rng;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Network shape configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub kind: ProblemKind,
    /// Message-passing layers. Zero is allowed for the degenerate
    /// head-on-embeddings configuration used in tests.
    pub depth: usize,
    /// Feature width d.
    pub hidden: usize,
    /// Sinusoidal timestep embedding width (even).
    pub timestep_embed_dim: usize,
    /// Hidden width of the two-layer MLPs; defaults to `hidden`.
    pub mlp_hidden: usize,
    /// TSP only: sinusoidal frequencies per coordinate; node feature width is
    /// 4 * coord_freqs.
    pub coord_freqs: usize,
}

impl GnnConfig {
    pub fn new(kind: ProblemKind, depth: usize, hidden: usize) -> Result<Self> {
        let cfg = Self {
            kind,
            depth,
            hidden,
            timestep_embed_dim: hidden.max(2) & !1,
            mlp_hidden: hidden,
            coord_freqs: 8,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden < 2 {
            return Err(Error::Config("hidden width must be >= 2".into()));
        }
        if self.timestep_embed_dim < 2 || self.timestep_embed_dim % 2 != 0 {
            return Err(Error::Config("timestep embedding width must be even and >= 2".into()));
        }
        if self.mlp_hidden < 1 {
            return Err(Error::Config("mlp hidden width must be >= 1".into()));
        }
        if self.kind == ProblemKind::Tsp && self.coord_freqs < 1 {
            return Err(Error::Config("coord_freqs must be >= 1 for TSP".into()));
        }
        Ok(())
    }

    /// Node input feature width.
    pub fn node_feat_dim(&self) -> usize {
        match self.kind {
            ProblemKind::Tsp => 4 * self.coord_freqs,
            ProblemKind::Mis => self.hidden,
        }
    }
}

/// One named tensor inside the flat buffer. Vectors are stored as (len, 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_matrix(&self) -> bool {
        self.rows > 1 && self.cols > 1
    }
}

pub type SegId = usize;

/// Per-layer segment handles.
#[derive(Debug, Clone)]
pub struct LayerIds {
    pub u: SegId,
    pub v: SegId,
    pub p: SegId,
    pub q: SegId,
    pub r: SegId,
    pub mlp_e_w1: SegId,
    pub mlp_e_b1: SegId,
    pub mlp_e_w2: SegId,
    pub mlp_e_b2: SegId,
    pub mlp_t_w1: SegId,
    pub mlp_t_b1: SegId,
    pub mlp_t_w2: SegId,
    pub mlp_t_b2: SegId,
    pub bn_e_gamma: SegId,
    pub bn_e_beta: SegId,
    pub bn_h_gamma: SegId,
    pub bn_h_beta: SegId,
    /// Offsets into the running-stat buffer: (mean, var) for the edge and
    /// node batch norms. Each block has length `hidden`.
    pub bn_e_run: usize,
    pub bn_h_run: usize,
}

/// Canonical segment layout for a configuration.
#[derive(Debug)]
pub struct ParamLayout {
    pub config: GnnConfig,
    pub specs: Vec<TensorSpec>,
    pub total: usize,
    pub run_total: usize,
    pub input_node_w: Option<SegId>,
    pub input_node_b: Option<SegId>,
    pub input_embed: SegId,
    pub layers: Vec<LayerIds>,
    pub head_w: SegId,
    pub head_b: SegId,
    by_name: BTreeMap<String, SegId>,
    /// Which mask layer each segment belongs to.
    pub seg_owner: Vec<MaskOwner>,
}

/// Which part of the fine-tuning mask governs a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskOwner {
    Input,
    Layer(usize),
    Head,
}

impl ParamLayout {
    pub fn build(config: &GnnConfig) -> Arc<Self> {
        let d = config.hidden;
        let mh = config.mlp_hidden;
        let te = config.timestep_embed_dim;
        let mut specs: Vec<TensorSpec> = Vec::new();
        let mut owners: Vec<MaskOwner> = Vec::new();
        let mut offset = 0usize;
        let mut push = |specs: &mut Vec<TensorSpec>,
                        owners: &mut Vec<MaskOwner>,
                        name: String,
                        rows: usize,
                        cols: usize,
                        owner: MaskOwner|
         -> SegId {
            let id = specs.len();
            specs.push(TensorSpec {
                name,
                rows,
                cols,
                offset,
            });
            owners.push(owner);
            offset += rows * cols;
            id
        };

        let (input_node_w, input_node_b) = match config.kind {
            ProblemKind::Tsp => {
                let w = push(
                    &mut specs,
                    &mut owners,
                    "input.node_w".into(),
                    d,
                    config.node_feat_dim(),
                    MaskOwner::Input,
                );
                let b = push(&mut specs, &mut owners, "input.node_b".into(), d, 1, MaskOwner::Input);
                (Some(w), Some(b))
            }
            ProblemKind::Mis => (None, None),
        };
        let input_embed = push(&mut specs, &mut owners, "input.embed".into(), 2, d, MaskOwner::Input);

        let mut layers = Vec::with_capacity(config.depth);
        let mut run_offset = 0usize;
        for l in 0..config.depth {
            let o = MaskOwner::Layer(l);
            let pfx = format!("layer{l}");
            let u = push(&mut specs, &mut owners, format!("{pfx}.u"), d, d, o);
            let v = push(&mut specs, &mut owners, format!("{pfx}.v"), d, d, o);
            let p = push(&mut specs, &mut owners, format!("{pfx}.p"), d, d, o);
            let q = push(&mut specs, &mut owners, format!("{pfx}.q"), d, d, o);
            let r = push(&mut specs, &mut owners, format!("{pfx}.r"), d, d, o);
            let mlp_e_w1 = push(&mut specs, &mut owners, format!("{pfx}.mlp_e.w1"), mh, d, o);
            let mlp_e_b1 = push(&mut specs, &mut owners, format!("{pfx}.mlp_e.b1"), mh, 1, o);
            let mlp_e_w2 = push(&mut specs, &mut owners, format!("{pfx}.mlp_e.w2"), d, mh, o);
            let mlp_e_b2 = push(&mut specs, &mut owners, format!("{pfx}.mlp_e.b2"), d, 1, o);
            let mlp_t_w1 = push(&mut specs, &mut owners, format!("{pfx}.mlp_t.w1"), mh, te, o);
            let mlp_t_b1 = push(&mut specs, &mut owners, format!("{pfx}.mlp_t.b1"), mh, 1, o);
            let mlp_t_w2 = push(&mut specs, &mut owners, format!("{pfx}.mlp_t.w2"), d, mh, o);
            let mlp_t_b2 = push(&mut specs, &mut owners, format!("{pfx}.mlp_t.b2"), d, 1, o);
            let bn_e_gamma = push(&mut specs, &mut owners, format!("{pfx}.bn_e.gamma"), d, 1, o);
            let bn_e_beta = push(&mut specs, &mut owners, format!("{pfx}.bn_e.beta"), d, 1, o);
            let bn_h_gamma = push(&mut specs, &mut owners, format!("{pfx}.bn_h.gamma"), d, 1, o);
            let bn_h_beta = push(&mut specs, &mut owners, format!("{pfx}.bn_h.beta"), d, 1, o);
            let bn_e_run = run_offset;
            run_offset += 2 * d;
            let bn_h_run = run_offset;
            run_offset += 2 * d;
            layers.push(LayerIds {
                u,
                v,
                p,
                q,
                r,
                mlp_e_w1,
                mlp_e_b1,
                mlp_e_w2,
                mlp_e_b2,
                mlp_t_w1,
                mlp_t_b1,
                mlp_t_w2,
                mlp_t_b2,
                bn_e_gamma,
                bn_e_beta,
                bn_h_gamma,
                bn_h_beta,
                bn_e_run,
                bn_h_run,
            });
        }
        let head_w = push(&mut specs, &mut owners, "head.w".into(), 2, d, MaskOwner::Head);
        let head_b = push(&mut specs, &mut owners, "head.b".into(), 2, 1, MaskOwner::Head);

        let by_name = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Arc::new(Self {
            config: config.clone(),
            total: offset,
            run_total: run_offset,
            specs,
            input_node_w,
            input_node_b,
            input_embed,
            layers,
            head_w,
            head_b,
            by_name,
            seg_owner: owners,
        })
    }

    pub fn seg(&self, name: &str) -> SegId {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter segment {name}"))
    }
}

/// Flat parameter store plus batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct GnnParams {
    pub layout: Arc<ParamLayout>,
    pub data: Vec<f64>,
    /// Running (mean, var) blocks per batch norm; not trained.
    pub bn_running: Vec<f64>,
}

impl PartialEq for GnnParams {
    fn eq(&self, other: &Self) -> bool {
        self.layout.config == other.layout.config
            && self.data == other.data
            && self.bn_running == other.bn_running
    }
}

impl GnnParams {
    /// Scaled-uniform fan-in initialization: matrices U(-a, a) with
    /// a = 1/sqrt(fan_in), biases zero, batch-norm scale one / shift zero,
    /// running stats (0, 1).
    pub fn init(config: &GnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::build(config);
        let mut data = vec![0.0; layout.total];
        let mut rng = derive_rng(seed, &[crate::rng::tag("gnn-init")]);
        for spec in &layout.specs {
            let slice = &mut data[spec.offset..spec.offset + spec.len()];
            if spec.name.ends_with(".gamma") {
                slice.fill(1.0);
            } else if spec.name.ends_with(".beta") || spec.cols == 1 {
                slice.fill(0.0);
            } else {
                let a = 1.0 / (spec.cols as f64).sqrt();
                for x in slice.iter_mut() {
                    *x = (rng.gen::<f64>() * 2.0 - 1.0) * a;
                }
            }
        }
        let mut bn_running = vec![0.0; layout.run_total];
        // var blocks start at 1: blocks are (mean, var) pairs of width d.
        let d = config.hidden;
        let mut off = 0;
        while off < bn_running.len() {
            bn_running[off + d..off + 2 * d].fill(1.0);
            off += 2 * d;
        }
        Ok(Self {
            layout,
            data,
            bn_running,
        })
    }

    pub fn config(&self) -> &GnnConfig {
        &self.layout.config
    }

    pub fn mat(&self, seg: SegId) -> ArrayView2<'_, f64> {
        let s = &self.layout.specs[seg];
        ArrayView2::from_shape((s.rows, s.cols), &self.data[s.offset..s.offset + s.len()])
            .expect("layout shapes are consistent")
    }

    pub fn vec(&self, seg: SegId) -> &[f64] {
        let s = &self.layout.specs[seg];
        &self.data[s.offset..s.offset + s.len()]
    }

    pub fn mat_mut(&mut self, seg: SegId) -> ArrayViewMut2<'_, f64> {
        let s = self.layout.specs[seg].clone();
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut self.data[s.offset..s.offset + s.len()])
            .expect("layout shapes are consistent")
    }

    /// Running (mean, var) slices for a batch-norm block.
    pub fn bn_run(&self, run_offset: usize) -> (&[f64], &[f64]) {
        let d = self.layout.config.hidden;
        (
            &self.bn_running[run_offset..run_offset + d],
            &self.bn_running[run_offset + d..run_offset + 2 * d],
        )
    }
}

/// Per-layer fine-tuning mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerMode {
    Frozen,
    Lora,
    Full,
}

/// Which parameters train, and how.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneMask {
    pub input: LayerMode,
    pub layers: Vec<LayerMode>,
    pub head: LayerMode,
}

impl FinetuneMask {
    pub fn all_full(depth: usize) -> Self {
        Self {
            input: LayerMode::Full,
            layers: vec![LayerMode::Full; depth],
            head: LayerMode::Full,
        }
    }

    pub fn all_frozen(depth: usize) -> Self {
        Self {
            input: LayerMode::Frozen,
            layers: vec![LayerMode::Frozen; depth],
            head: LayerMode::Frozen,
        }
    }

    /// Hybrid fine-tuning: adapters on the input layer and all but the last
    /// `selective_layers` message-passing layers; those trailing layers and
    /// the output head train in full.
    pub fn hybrid(depth: usize, selective_layers: usize) -> Self {
        let s = selective_layers.min(depth);
        let mut layers = vec![LayerMode::Lora; depth];
        for mode in layers.iter_mut().skip(depth - s) {
            *mode = LayerMode::Full;
        }
        Self {
            input: LayerMode::Lora,
            layers,
            head: LayerMode::Full,
        }
    }

    pub fn mode_of(&self, owner: MaskOwner) -> LayerMode {
        match owner {
            MaskOwner::Input => self.input,
            MaskOwner::Layer(l) => self.layers[l],
            MaskOwner::Head => self.head,
        }
    }

    pub fn seg_modes(&self, layout: &ParamLayout) -> Vec<LayerMode> {
        layout.seg_owner.iter().map(|&o| self.mode_of(o)).collect()
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.layers.len() != depth {
            return Err(Error::Config(format!(
                "mask covers {} layers but network has {depth}",
                self.layers.len()
            )));
        }
        Ok(())
    }
}

/// Low-rank adapter factors for every adapted matrix segment.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapters {
    pub rank: usize,
    pub scaling: f64,
    /// (target segment, A offset, B offset) into `data`. A is (rows x rank),
    /// B is (rank x cols) of the target matrix.
    pub segs: Vec<(SegId, usize, usize)>,
    pub data: Vec<f64>,
    /// SegId -> index into `segs`.
    index: Vec<Option<u32>>,
}

impl LoraAdapters {
    /// Builds adapters for every matrix segment in Lora-mode layers. A is
    /// fan-in scaled uniform, B starts at zero so the initial delta vanishes.
    pub fn new(
        layout: &ParamLayout,
        mask: &FinetuneMask,
        rank: usize,
        scaling: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank < 1 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        let mut rng = derive_rng(seed, &[crate::rng::tag("lora-init")]);
        let mut segs = Vec::new();
        let mut data = Vec::new();
        let mut index = vec![None; layout.specs.len()];
        for (id, spec) in layout.specs.iter().enumerate() {
            if !spec.is_matrix() || mask.mode_of(layout.seg_owner[id]) != LayerMode::Lora {
                continue;
            }
            let a_offset = data.len();
            let a_scale = 1.0 / (spec.cols as f64).sqrt();
            for _ in 0..spec.rows * rank {
                data.push((rng.gen::<f64>() * 2.0 - 1.0) * a_scale);
            }
            let b_offset = data.len();
            data.extend(std::iter::repeat(0.0).take(rank * spec.cols));
            index[id] = Some(segs.len() as u32);
            segs.push((id, a_offset, b_offset));
        }
        Ok(Self {
            rank,
            scaling,
            segs,
            data,
            index,
        })
    }

    pub fn index_of(&self, seg: SegId) -> Option<usize> {
        self.index.get(seg).copied().flatten().map(|i| i as usize)
    }

    /// (A, B) views for an adapted segment.
    pub fn factors(&self, layout: &ParamLayout, k: usize) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
        let (seg, a_off, b_off) = self.segs[k];
        let spec = &layout.specs[seg];
        let a = ArrayView2::from_shape((spec.rows, self.rank), &self.data[a_off..a_off + spec.rows * self.rank])
            .expect("adapter shapes are consistent");
        let b = ArrayView2::from_shape((self.rank, spec.cols), &self.data[b_off..b_off + self.rank * spec.cols])
            .expect("adapter shapes are consistent");
        (a, b)
    }
}

/// Gradients mirroring the parameter and adapter buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnGrads {
    pub main: Vec<f64>,
    pub adapter: Vec<f64>,
}

impl GnnGrads {
    pub fn zeros(params: &GnnParams, adapters: Option<&LoraAdapters>) -> Self {
        Self {
            main: vec![0.0; params.data.len()],
            adapter: vec![0.0; adapters.map_or(0, |a| a.data.len())],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.main.iter().all(|&x| x == 0.0) && self.adapter.iter().all(|&x| x == 0.0)
    }

    pub fn add_assign(&mut self, other: &GnnGrads) {
        assert_eq!(self.main.len(), other.main.len());
        assert_eq!(self.adapter.len(), other.adapter.len());
        for (a, b) in self.main.iter_mut().zip(&other.main) {
            *a += b;
        }
        for (a, b) in self.adapter.iter_mut().zip(&other.adapter) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.main.iter_mut() {
            *a *= s;
        }
        for a in self.adapter.iter_mut() {
            *a *= s;
        }
    }

    pub fn has_nan(&self) -> bool {
        self.main.iter().chain(self.adapter.iter()).any(|x| !x.is_finite())
    }
}

/// Network parameters plus adapters and the fine-tuning mask. The version tag
/// increments on every parameter update and enforces the on-policy contract.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    pub params: GnnParams,
    pub adapters: Option<LoraAdapters>,
    pub mask: FinetuneMask,
    pub version: u64,
}

impl PolicySnapshot {
    /// Fresh fully-trainable policy, as used for supervised pre-training.
    pub fn new(config: &GnnConfig, seed: u64) -> Result<Self> {
        let params = GnnParams::init(config, seed)?;
        let mask = FinetuneMask::all_full(config.depth);
        Ok(Self {
            params,
            adapters: None,
            mask,
            version: 0,
        })
    }

    /// Converts a pre-trained policy into the hybrid fine-tuning setup:
    /// adapters on the backbone, full training on the trailing layers + head.
    pub fn into_hybrid(mut self, rank: usize, scaling: f64, selective_layers: usize, seed: u64) -> Result<Self> {
        let depth = self.params.config().depth;
        let mask = FinetuneMask::hybrid(depth, selective_layers);
        let adapters = LoraAdapters::new(&self.params.layout, &mask, rank, scaling, seed)?;
        self.mask = mask;
        self.adapters = Some(adapters);
        Ok(self)
    }

    /// Folds adapter deltas into the base weights and drops the adapters.
    pub fn merged_params(&self) -> GnnParams {
        let mut params = self.params.clone();
        if let Some(ad) = &self.adapters {
            for k in 0..ad.segs.len() {
                let (seg, _, _) = ad.segs[k];
                let (a, b) = ad.factors(&params.layout, k);
                let delta = a.dot(&b) * ad.scaling;
                let mut w = params.mat_mut(seg);
                w += &delta;
            }
        }
        params
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tsp_config() -> GnnConfig {
        GnnConfig::new(ProblemKind::Tsp, 2, 8).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tsp_config();
        let a = GnnParams::init(&cfg, 3).unwrap();
        let b = GnnParams::init(&cfg, 3).unwrap();
        assert_eq!(a.data, b.data);
        let c = GnnParams::init(&cfg, 4).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn layout_names_resolve() {
        let cfg = tsp_config();
        let layout = ParamLayout::build(&cfg);
        assert_eq!(layout.seg("layer0.u"), layout.layers[0].u);
        assert_eq!(layout.seg("head.w"), layout.head_w);
        assert_eq!(layout.seg("input.embed"), layout.input_embed);
        let total: usize = layout.specs.iter().map(|s| s.len()).sum();
        assert_eq!(total, layout.total);
    }

    #[test]
    fn bn_running_stats_start_at_identity() {
        let cfg = tsp_config();
        let params = GnnParams::init(&cfg, 0).unwrap();
        let (mean, var) = params.bn_run(params.layout.layers[0].bn_e_run);
        assert!(mean.iter().all(|&m| m == 0.0));
        assert!(var.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hybrid_mask_shape() {
        let mask = FinetuneMask::hybrid(4, 1);
        assert_eq!(mask.input, LayerMode::Lora);
        assert_eq!(
            mask.layers,
            vec![LayerMode::Lora, LayerMode::Lora, LayerMode::Lora, LayerMode::Full]
        );
        assert_eq!(mask.head, LayerMode::Full);
        let wide = FinetuneMask::hybrid(2, 5);
        assert_eq!(wide.layers, vec![LayerMode::Full, LayerMode::Full]);
    }

    #[test]
    fn adapters_cover_lora_matrices_only() {
        let cfg = tsp_config();
        let layout = ParamLayout::build(&cfg);
        let mask = FinetuneMask::hybrid(cfg.depth, 1);
        let ad = LoraAdapters::new(&layout, &mask, 2, 1.0, 7).unwrap();
        for &(seg, _, _) in &ad.segs {
            assert!(layout.specs[seg].is_matrix());
            assert_eq!(mask.mode_of(layout.seg_owner[seg]), LayerMode::Lora);
        }
        // layer1 is Full, so none of its matrices are adapted.
        assert!(ad.index_of(layout.layers[1].u).is_none());
        assert!(ad.index_of(layout.layers[0].u).is_some());
        assert!(ad.index_of(layout.seg("input.node_w")).is_some());
        // B factors start at zero.
        for k in 0..ad.segs.len() {
            let (_, b) = ad.factors(&layout, k);
            assert!(b.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn merged_params_without_adapters_is_identity() {
        let cfg = tsp_config();
        let policy = PolicySnapshot::new(&cfg, 5).unwrap();
        assert_eq!(policy.merged_params(), policy.params);
    }
}
