//! The hybrid tracker: a frame transformer branch and an event spiking
//! branch coupled per layer by sparse-coding adapters, a center-style score
//! head over search tokens, training losses, and the sequence protocol.
//!
//! Layer wiring (both directions enabled): with x_I the frame tokens and x_E
//! the (T-step) event tokens of paired layer k,
//!   stage 1: x_I1 = x_I + MSA(LN(x_I)) + map_EI(x_E)
//!            x_E1 = x_E + SpikeMSA(x_E) + broadcast(map_IE(x_I))
//!   stage 2: x_I2 = x_I1 + MLP(LN(x_I1)) + map_EI(x_E1)
//!            x_E2 = x_E1 + SpikeMLP(x_E1) + broadcast(map_IE(x_I1))
//! Adapter codes chain along each direction; event-side codes pass through
//! temporal attention so mapped features land single-step on the frame side.
//! `literal_stage_wiring` feeds stage-2 adapters the layer inputs instead of
//! the stage-1 outputs.

use ndarray::{Array1, Array3, Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::energy::Probe;
use crate::eventsim::{
    crop_resize_events, crop_resize_image, events_to_frames, BoundingBox, EventStream,
};
use crate::graph::{Graph, SpikeMode, Var};
use crate::ista::{
    ista_adapter_forward, new_adapter, AdapterInit, AdapterParams,
};
use crate::params::{trunc_normal, ParamGroup, ParamId, ParamStore};
use crate::spiking::{
    new_spike_block, new_spiking_tokenizer, spike_block_forward, spike_mlp_forward,
    spike_msa_forward, tokenize_spiking, LifSpec, SpikeBlock, SpikingTokenizer,
};
use crate::vit::{
    new_vit_block, new_vit_embed, vit_block_attn, vit_block_forward, vit_block_mlp,
    vit_embed_forward, TokenRole, VitBlock, VitEmbed,
};
use crate::{CoreError, Result};

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
pub const LOSS_W_SCORE: f64 = 1.0;
pub const LOSS_W_L1: f64 = 5.0;
pub const LOSS_W_GIOU: f64 = 2.0;
/// Score-head bias prior: logit of a 10% positive rate.
pub const SCORE_BIAS_INIT: f64 = -2.1972245773362196;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Hybrid,
    RgbOnly,
    EventOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionDirections {
    Both,
    EventToRgb,
    RgbToEvent,
    None,
}

impl FusionDirections {
    pub fn e2i(&self) -> bool {
        matches!(self, FusionDirections::Both | FusionDirections::EventToRgb)
    }

    pub fn i2e(&self) -> bool {
        matches!(self, FusionDirections::Both | FusionDirections::RgbToEvent)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterPlacement {
    FirstLayers,
    LastLayers,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeChaining {
    /// One code chain per direction, threaded through both stages.
    SingleChain,
    /// Independent chains for stage-1 and stage-2 adapters.
    PerStage,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub modality: Modality,
    pub ann_dim: usize,
    pub snn_dim: usize,
    pub code_dim: usize,
    pub ann_depth: usize,
    pub snn_depth: usize,
    /// Number of layer pairs carrying adapters.
    pub fusion_layers: usize,
    pub placement: AdapterPlacement,
    pub directions: FusionDirections,
    pub chaining: CodeChaining,
    pub literal_stage_wiring: bool,
    pub heads: usize,
    pub ann_mlp_hidden: usize,
    pub snn_mlp_hidden: usize,
    pub snn_mlp_kernel: usize,
    pub head_hidden: usize,
    pub time_steps: usize,
    pub patch: usize,
    pub template_size: usize,
    pub search_size: usize,
    /// Collapse event-side codes over steps with temporal attention.
    pub tda_enabled: bool,
    /// Average the thresholded and unthresholded adapter codes.
    pub skip_average: bool,
    pub lif_tau: f64,
    pub lif_v_th: f64,
    pub spike_mode: SpikeMode,
    pub template_context: f64,
    pub search_context: f64,
}

impl TrackerConfig {
    /// Small configuration sized for single-core CPU training.
    pub fn toy() -> Self {
        Self {
            modality: Modality::Hybrid,
            ann_dim: 64,
            snn_dim: 64,
            code_dim: 8,
            ann_depth: 4,
            snn_depth: 3,
            fusion_layers: 2,
            placement: AdapterPlacement::FirstLayers,
            directions: FusionDirections::Both,
            chaining: CodeChaining::SingleChain,
            literal_stage_wiring: false,
            heads: 4,
            ann_mlp_hidden: 128,
            snn_mlp_hidden: 128,
            snn_mlp_kernel: 1,
            head_hidden: 128,
            time_steps: 3,
            patch: 16,
            template_size: 64,
            search_size: 128,
            tda_enabled: true,
            skip_average: true,
            lif_tau: crate::spiking::DEFAULT_TAU,
            lif_v_th: crate::spiking::DEFAULT_V_TH,
            spike_mode: SpikeMode::Hard,
            template_context: 2.0,
            search_context: 4.0,
        }
    }

    /// Larger configuration with full-resolution crops.
    pub fn full() -> Self {
        Self {
            ann_dim: 256,
            snn_dim: 256,
            code_dim: 32,
            ann_depth: 8,
            snn_depth: 4,
            fusion_layers: 4,
            heads: 8,
            ann_mlp_hidden: 512,
            snn_mlp_hidden: 512,
            head_hidden: 256,
            time_steps: 4,
            template_size: 128,
            search_size: 256,
            ..Self::toy()
        }
    }

    pub fn lif(&self) -> LifSpec {
        LifSpec { tau: self.lif_tau, v_th: self.lif_v_th, mode: self.spike_mode }
    }

    pub fn has_ann(&self) -> bool {
        matches!(self.modality, Modality::Hybrid | Modality::RgbOnly)
    }

    pub fn has_snn(&self) -> bool {
        matches!(self.modality, Modality::Hybrid | Modality::EventOnly)
    }

    pub fn tokens_template(&self) -> usize {
        (self.template_size / self.patch) * (self.template_size / self.patch)
    }

    pub fn tokens_search(&self) -> usize {
        (self.search_size / self.patch) * (self.search_size / self.patch)
    }

    pub fn score_grid(&self) -> usize {
        self.search_size / self.patch
    }

    /// Layer indices carrying adapters.
    pub fn fused_layers(&self) -> Vec<usize> {
        if !matches!(self.modality, Modality::Hybrid)
            || matches!(self.directions, FusionDirections::None)
        {
            return Vec::new();
        }
        match self.placement {
            AdapterPlacement::FirstLayers => (0..self.fusion_layers).collect(),
            AdapterPlacement::LastLayers => {
                (self.snn_depth - self.fusion_layers..self.snn_depth).collect()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::Config(msg));
        if self.patch == 0 || self.template_size % self.patch != 0 || self.search_size % self.patch != 0 {
            return fail(format!(
                "crop sizes {}x{} must be multiples of patch {}",
                self.template_size, self.search_size, self.patch
            ));
        }
        if self.template_size >= self.search_size {
            return fail("template crop must be smaller than search crop".into());
        }
        if self.time_steps == 0 {
            return fail("time_steps must be at least 1".into());
        }
        if self.has_ann() {
            if self.ann_dim == 0 || self.ann_depth == 0 || self.heads == 0 {
                return fail("frame branch dimensions must be positive".into());
            }
            if self.ann_dim % self.heads != 0 {
                return fail(format!(
                    "ann_dim {} not divisible by heads {}",
                    self.ann_dim, self.heads
                ));
            }
        }
        if self.has_snn() {
            if self.snn_dim == 0 || self.snn_depth == 0 {
                return fail("event branch dimensions must be positive".into());
            }
            if self.snn_mlp_kernel % 2 == 0 {
                return fail("snn_mlp_kernel must be odd".into());
            }
            if !(self.lif_tau.is_finite() && self.lif_v_th > 0.0) {
                return fail("invalid neuron constants".into());
            }
        }
        if matches!(self.modality, Modality::Hybrid) {
            if self.snn_depth > self.ann_depth {
                return fail(format!(
                    "snn_depth {} exceeds ann_depth {}",
                    self.snn_depth, self.ann_depth
                ));
            }
            if self.fusion_layers > self.snn_depth {
                return fail(format!(
                    "fusion_layers {} exceeds snn_depth {}",
                    self.fusion_layers, self.snn_depth
                ));
            }
            if self.code_dim == 0 && !matches!(self.directions, FusionDirections::None) {
                return fail("code_dim must be positive when adapters exist".into());
            }
            if self.directions.e2i() && self.fusion_layers > 0 && !self.tda_enabled {
                return fail(
                    "event-to-frame adapters need tda_enabled to collapse steps".into(),
                );
            }
        }
        if self.head_hidden == 0 {
            return fail("head_hidden must be positive".into());
        }
        if !(self.template_context > 0.0 && self.search_context > 0.0) {
            return fail("crop context factors must be positive".into());
        }
        Ok(())
    }
}

/// Per-token score and box head: shared two-layer MLP producing rows
/// [score, off_x, off_y, w, h].
#[derive(Clone, Debug)]
pub struct Head {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

fn new_head(
    store: &mut ParamStore,
    name: &str,
    in_dim: usize,
    hidden: usize,
    rng: &mut impl rand::Rng,
) -> Head {
    let mut b2 = ArrayD::zeros(ndarray::IxDyn(&[5, 1]));
    b2[[0, 0]] = SCORE_BIAS_INIT;
    Head {
        w1: store.add(
            format!("{name}.w1"),
            ParamGroup::Head,
            trunc_normal(&[hidden, in_dim], 0.02, rng),
        ),
        b1: store.add(
            format!("{name}.b1"),
            ParamGroup::Head,
            ArrayD::zeros(ndarray::IxDyn(&[hidden, 1])),
        ),
        w2: store.add(
            format!("{name}.w2"),
            ParamGroup::Head,
            trunc_normal(&[5, hidden], 0.02, rng),
        ),
        b2: store.add(format!("{name}.b2"), ParamGroup::Head, b2),
    }
}

fn head_forward(g: &mut Graph, store: &ParamStore, head: &Head, x: Var) -> Var {
    let w1 = g.param(store, head.w1);
    let b1 = g.param(store, head.b1);
    let h = g.linear(w1, x);
    let h = g.add(h, b1);
    let h = g.gelu(h);
    let w2 = g.param(store, head.w2);
    let b2 = g.param(store, head.b2);
    let o = g.linear(w2, h);
    g.add(o, b2)
}

#[derive(Clone, Debug)]
struct AnnBranch {
    embed: VitEmbed,
    blocks: Vec<VitBlock>,
}

#[derive(Clone, Debug)]
struct SnnBranch {
    tok: SpikingTokenizer,
    blocks: Vec<SpikeBlock>,
}

#[derive(Clone, Debug, Default)]
struct LayerAdapters {
    e2i_1: Option<AdapterParams>,
    e2i_2: Option<AdapterParams>,
    i2e_1: Option<AdapterParams>,
    i2e_2: Option<AdapterParams>,
}

#[derive(Clone, Debug, Default)]
struct ChainInits {
    e2i_1: Option<ParamId>,
    e2i_2: Option<ParamId>,
    i2e_1: Option<ParamId>,
    i2e_2: Option<ParamId>,
}

#[derive(Clone)]
pub struct HybridModel {
    pub cfg: TrackerConfig,
    pub store: ParamStore,
    ann: Option<AnnBranch>,
    snn: Option<SnnBranch>,
    adapters: Vec<Option<LayerAdapters>>,
    p0: ChainInits,
    head: Head,
}

impl HybridModel {
    pub fn new(cfg: TrackerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n_tpl = cfg.tokens_template();
        let n_srch = cfg.tokens_search();
        let ann = cfg.has_ann().then(|| AnnBranch {
            embed: new_vit_embed(
                &mut store, "ann.embed", 3, cfg.ann_dim, cfg.patch, n_tpl, n_srch, &mut rng,
            ),
            blocks: (0..cfg.ann_depth)
                .map(|k| {
                    new_vit_block(
                        &mut store,
                        &format!("ann.block{k}"),
                        cfg.ann_dim,
                        cfg.heads,
                        cfg.ann_mlp_hidden,
                        &mut rng,
                    )
                })
                .collect(),
        });
        let snn = cfg.has_snn().then(|| SnnBranch {
            tok: new_spiking_tokenizer(&mut store, "snn.tok", 3, cfg.snn_dim, cfg.patch, &mut rng),
            blocks: (0..cfg.snn_depth)
                .map(|k| {
                    new_spike_block(
                        &mut store,
                        &format!("snn.block{k}"),
                        cfg.snn_dim,
                        cfg.snn_mlp_hidden,
                        cfg.snn_mlp_kernel,
                        &mut rng,
                    )
                })
                .collect(),
        });
        let fused = cfg.fused_layers();
        let mut adapters: Vec<Option<LayerAdapters>> = vec![None; cfg.ann_depth.max(1)];
        for &k in &fused {
            let mut la = LayerAdapters::default();
            let mk_e2i = |store: &mut ParamStore, rng: &mut ChaCha12Rng, name: String| {
                new_adapter(
                    store,
                    &AdapterInit {
                        name: &name,
                        m_src: cfg.snn_dim,
                        m_dst: cfg.ann_dim,
                        code_dim: cfg.code_dim,
                        tda_pool_len: cfg.tda_enabled.then_some(cfg.code_dim),
                    },
                    rng,
                )
            };
            let mk_i2e = |store: &mut ParamStore, rng: &mut ChaCha12Rng, name: String| {
                new_adapter(
                    store,
                    &AdapterInit {
                        name: &name,
                        m_src: cfg.ann_dim,
                        m_dst: cfg.snn_dim,
                        code_dim: cfg.code_dim,
                        tda_pool_len: None,
                    },
                    rng,
                )
            };
            if cfg.directions.e2i() {
                la.e2i_1 = Some(mk_e2i(&mut store, &mut rng, format!("fuse{k}.e2i.s1")));
                la.e2i_2 = Some(mk_e2i(&mut store, &mut rng, format!("fuse{k}.e2i.s2")));
            }
            if cfg.directions.i2e() {
                la.i2e_1 = Some(mk_i2e(&mut store, &mut rng, format!("fuse{k}.i2e.s1")));
                la.i2e_2 = Some(mk_i2e(&mut store, &mut rng, format!("fuse{k}.i2e.s2")));
            }
            adapters[k] = Some(la);
        }
        let mut p0 = ChainInits::default();
        if !fused.is_empty() {
            let add_p0 = |store: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, src: usize| {
                store.add(
                    format!("fuse.p0.{name}"),
                    ParamGroup::Adapter,
                    trunc_normal(&[cfg.code_dim, src], 0.02, rng),
                )
            };
            if cfg.directions.e2i() {
                p0.e2i_1 = Some(add_p0(&mut store, &mut rng, "e2i", cfg.snn_dim));
                if matches!(cfg.chaining, CodeChaining::PerStage) {
                    p0.e2i_2 = Some(add_p0(&mut store, &mut rng, "e2i.s2", cfg.snn_dim));
                }
            }
            if cfg.directions.i2e() {
                p0.i2e_1 = Some(add_p0(&mut store, &mut rng, "i2e", cfg.ann_dim));
                if matches!(cfg.chaining, CodeChaining::PerStage) {
                    p0.i2e_2 = Some(add_p0(&mut store, &mut rng, "i2e.s2", cfg.ann_dim));
                }
            }
        }
        let head_in = match cfg.modality {
            Modality::Hybrid => cfg.ann_dim + cfg.snn_dim,
            Modality::RgbOnly => cfg.ann_dim,
            Modality::EventOnly => cfg.snn_dim,
        };
        let head = new_head(&mut store, "head", head_in, cfg.head_hidden, &mut rng);
        Ok(Self { cfg, store, ann, snn, adapters, p0, head })
    }

    fn ann(&self) -> &AnnBranch {
        self.ann.as_ref().expect("frame branch missing")
    }

    fn snn(&self) -> &SnnBranch {
        self.snn.as_ref().expect("event branch missing")
    }

    /// Joint frame tokens (M, N_tpl + N_srch) from template and search crops.
    fn embed_ann(&self, g: &mut Graph, tpl: Var, srch: Var) -> Result<Var> {
        let a = self.ann();
        let zt = vit_embed_forward(g, &self.store, &a.embed, tpl, TokenRole::Template)?;
        let zs = vit_embed_forward(g, &self.store, &a.embed, srch, TokenRole::Search)?;
        Ok(g.concat(1, &[zt, zs]))
    }

    /// Joint event tokens (T, M, N_tpl + N_srch).
    fn embed_snn(&self, g: &mut Graph, tpl: Var, srch: Var, probe: &mut Probe) -> Result<Var> {
        let s = self.snn();
        let lif = self.cfg.lif();
        let zt = tokenize_spiking(g, &self.store, &s.tok, tpl, lif, "snn.tok.tpl", probe)?;
        let zs = tokenize_spiking(g, &self.store, &s.tok, srch, lif, "snn.tok.srch", probe)?;
        Ok(g.concat(2, &[zt, zs]))
    }

    fn run_backbone(
        &self,
        g: &mut Graph,
        mut x_i: Option<Var>,
        mut x_e: Option<Var>,
        probe: &mut Probe,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let cfg = &self.cfg;
        let lif = cfg.lif();
        let per_stage = matches!(cfg.chaining, CodeChaining::PerStage);
        // chain codes, initialized lazily from the pre-encoder tokens
        let mut code_e2i_1 = None;
        let mut code_e2i_2 = None;
        let mut code_i2e_1 = None;
        let mut code_i2e_2 = None;
        if let (Some(xi0), true) = (x_i, cfg.directions.i2e()) {
            if let Some(p0) = self.p0.i2e_1 {
                let p = g.param(&self.store, p0);
                code_i2e_1 = Some(crate::ista::init_code(g, p, xi0));
            }
            if let Some(p0) = self.p0.i2e_2 {
                let p = g.param(&self.store, p0);
                code_i2e_2 = Some(crate::ista::init_code(g, p, xi0));
            }
        }
        if let (Some(xe0), true) = (x_e, cfg.directions.e2i()) {
            if let Some(p0) = self.p0.e2i_1 {
                let p = g.param(&self.store, p0);
                code_e2i_1 = Some(crate::ista::init_code(g, p, xe0));
            }
            if let Some(p0) = self.p0.e2i_2 {
                let p = g.param(&self.store, p0);
                code_e2i_2 = Some(crate::ista::init_code(g, p, xe0));
            }
        }
        for k in 0..cfg.ann_depth.max(cfg.snn_depth) {
            let la = self.adapters.get(k).and_then(|o| o.as_ref());
            let snn_here = x_e.is_some() && k < cfg.snn_depth;
            let ann_here = x_i.is_some() && k < cfg.ann_depth;
            match (la, ann_here && snn_here) {
                (Some(la), true) => {
                    let xi = x_i.unwrap();
                    let xe = x_e.unwrap();
                    let scope = format!("snn.block{k}");
                    // stage 1: attention halves plus mapped features
                    let xi_att = vit_block_attn(g, &self.store, &self.ann().blocks[k], xi);
                    let att = spike_msa_forward(
                        g,
                        &self.store,
                        &self.snn().blocks[k].msa,
                        xe,
                        lif,
                        &format!("{scope}.msa"),
                        probe,
                    )?;
                    let xe_att = g.add(xe, att);
                    let mut xi1 = xi_att;
                    if let Some(ap) = &la.e2i_1 {
                        let prev = code_e2i_1.expect("chain code missing");
                        let out =
                            ista_adapter_forward(g, &self.store, ap, xe, prev, true, cfg.skip_average)?;
                        probe.tensor(format!("fuse{k}.e2i.s1.code"), out.code);
                        xi1 = g.add(xi1, out.mapped);
                        code_e2i_1 = Some(out.code);
                    }
                    let mut xe1 = xe_att;
                    if let Some(ap) = &la.i2e_1 {
                        let prev = code_i2e_1.expect("chain code missing");
                        let out =
                            ista_adapter_forward(g, &self.store, ap, xi, prev, true, cfg.skip_average)?;
                        probe.tensor(format!("fuse{k}.i2e.s1.code"), out.code);
                        let t = g.value(xe1).shape()[0];
                        let b = g.broadcast_steps(out.mapped, t);
                        xe1 = g.add(xe1, b);
                        code_i2e_1 = Some(out.code);
                    }
                    // stage 2: MLP halves; adapters read stage-1 outputs unless
                    // the literal wiring is selected
                    let (src_e, src_i) = if cfg.literal_stage_wiring {
                        (xe, xi)
                    } else {
                        (xe1, xi1)
                    };
                    let xi_mlp = vit_block_mlp(g, &self.store, &self.ann().blocks[k], xi1);
                    let ff = spike_mlp_forward(
                        g,
                        &self.store,
                        &self.snn().blocks[k].mlp,
                        xe1,
                        lif,
                        &format!("{scope}.mlp"),
                        probe,
                    );
                    let xe_mlp = g.add(xe1, ff);
                    let mut xi2 = xi_mlp;
                    if let Some(ap) = &la.e2i_2 {
                        let prev = if per_stage { code_e2i_2 } else { code_e2i_1 }
                            .expect("chain code missing");
                        let out =
                            ista_adapter_forward(g, &self.store, ap, src_e, prev, true, cfg.skip_average)?;
                        probe.tensor(format!("fuse{k}.e2i.s2.code"), out.code);
                        xi2 = g.add(xi2, out.mapped);
                        if per_stage {
                            code_e2i_2 = Some(out.code);
                        } else {
                            code_e2i_1 = Some(out.code);
                        }
                    }
                    let mut xe2 = xe_mlp;
                    if let Some(ap) = &la.i2e_2 {
                        let prev = if per_stage { code_i2e_2 } else { code_i2e_1 }
                            .expect("chain code missing");
                        let out =
                            ista_adapter_forward(g, &self.store, ap, src_i, prev, true, cfg.skip_average)?;
                        probe.tensor(format!("fuse{k}.i2e.s2.code"), out.code);
                        let t = g.value(xe2).shape()[0];
                        let b = g.broadcast_steps(out.mapped, t);
                        xe2 = g.add(xe2, b);
                        if per_stage {
                            code_i2e_2 = Some(out.code);
                        } else {
                            code_i2e_1 = Some(out.code);
                        }
                    }
                    x_i = Some(xi2);
                    x_e = Some(xe2);
                }
                _ => {
                    if ann_here {
                        let xi = x_i.unwrap();
                        x_i = Some(vit_block_forward(g, &self.store, &self.ann().blocks[k], xi));
                    }
                    if snn_here {
                        let xe = x_e.unwrap();
                        x_e = Some(spike_block_forward(
                            g,
                            &self.store,
                            &self.snn().blocks[k],
                            xe,
                            lif,
                            &format!("snn.block{k}"),
                            probe,
                        )?);
                    }
                }
            }
        }
        Ok((x_i, x_e))
    }

    /// Head output (5, N_srch) over the search-token slice; event tokens are
    /// fused over steps by averaging before the head.
    fn forward_from_tokens(
        &self,
        g: &mut Graph,
        ann_tokens: Option<Var>,
        snn_tokens: Option<Var>,
        probe: &mut Probe,
    ) -> Result<TrackOutput> {
        let n_tpl = self.cfg.tokens_template();
        let n = n_tpl + self.cfg.tokens_search();
        if let Some(v) = ann_tokens {
            let shp = g.value(v).shape().to_vec();
            if shp != [self.cfg.ann_dim, n] {
                return Err(CoreError::InvalidArgument(format!(
                    "frame tokens {shp:?}, expected ({}, {n})",
                    self.cfg.ann_dim
                )));
            }
        }
        if let Some(v) = snn_tokens {
            let shp = g.value(v).shape().to_vec();
            if shp != [self.cfg.time_steps, self.cfg.snn_dim, n] {
                return Err(CoreError::InvalidArgument(format!(
                    "event tokens {shp:?}, expected ({}, {}, {n})",
                    self.cfg.time_steps, self.cfg.snn_dim
                )));
            }
        }
        let (x_i, x_e) = self.run_backbone(g, ann_tokens, snn_tokens, probe)?;
        let mut parts = Vec::new();
        let mut ann_search = None;
        let mut snn_search = None;
        if let Some(xi) = x_i {
            probe.tensor("ann.final", xi);
            let s = g.slice_axis(xi, 1, n_tpl, n);
            ann_search = Some(s);
            parts.push(s);
        }
        if let Some(xe) = x_e {
            probe.tensor("snn.final", xe);
            let fused_t = g.mean_axis0(xe);
            let s = g.slice_axis(fused_t, 1, n_tpl, n);
            snn_search = Some(s);
            parts.push(s);
        }
        let fused = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(0, &parts)
        };
        probe.tensor("head.in", fused);
        let head_out = head_forward(g, &self.store, &self.head, fused);
        Ok(TrackOutput { head_out, ann_search, snn_search })
    }

    /// Zero every adapter's synthesis dictionary, muting cross-branch
    /// feature injection while leaving both backbones untouched.
    pub fn silence_fusion(&mut self) {
        let ids: Vec<ParamId> = self
            .adapters
            .iter()
            .flatten()
            .flat_map(|la| {
                [&la.e2i_1, &la.e2i_2, &la.i2e_1, &la.i2e_2]
                    .into_iter()
                    .flatten()
                    .map(|ap| ap.d_syn)
                    .collect::<Vec<_>>()
            })
            .collect();
        for id in ids {
            self.store.value_mut(id).fill(0.0);
        }
    }

    /// Full in-graph forward for one template/search pair (training path).
    pub fn forward_pair(
        &self,
        g: &mut Graph,
        sample: &PairSample,
        probe: &mut Probe,
    ) -> Result<TrackOutput> {
        let ann_tokens = if self.cfg.has_ann() {
            let tpl = g.constant(sample.tpl_img.clone().into_dyn());
            let srch = g.constant(sample.srch_img.clone().into_dyn());
            Some(self.embed_ann(g, tpl, srch)?)
        } else {
            None
        };
        let snn_tokens = if self.cfg.has_snn() {
            let tpl = g.constant(sample.tpl_events.clone().into_dyn());
            let srch = g.constant(sample.srch_events.clone().into_dyn());
            Some(self.embed_snn(g, tpl, srch, probe)?)
        } else {
            None
        };
        self.forward_from_tokens(g, ann_tokens, snn_tokens, probe)
    }

    /// Template tokens as plain values, for reuse across a tracked sequence.
    pub fn encode_template(
        &self,
        tpl_img: &Array3<f64>,
        tpl_events: &Array4<f64>,
    ) -> Result<TemplateTokens> {
        let mut out = TemplateTokens::default();
        if self.cfg.has_ann() {
            let mut g = Graph::new();
            let tpl = g.constant(tpl_img.clone().into_dyn());
            let z = vit_embed_forward(&mut g, &self.store, &self.ann().embed, tpl, TokenRole::Template)?;
            out.ann = Some(g.value(z).clone());
        }
        if self.cfg.has_snn() {
            let mut g = Graph::new();
            let mut probe = Probe::off();
            let tpl = g.constant(tpl_events.clone().into_dyn());
            let z = tokenize_spiking(
                &mut g,
                &self.store,
                &self.snn().tok,
                tpl,
                self.cfg.lif(),
                "snn.tok.tpl",
                &mut probe,
            )?;
            out.snn = Some(g.value(z).clone());
        }
        Ok(out)
    }

    /// Forward against cached template tokens (tracking path; no gradients
    /// flow into the template encoding).
    pub fn forward_search(
        &self,
        g: &mut Graph,
        cache: &TemplateTokens,
        srch_img: Option<&Array3<f64>>,
        srch_events: Option<&Array4<f64>>,
        probe: &mut Probe,
    ) -> Result<TrackOutput> {
        let ann_tokens = if self.cfg.has_ann() {
            let zt_arr = cache
                .ann
                .as_ref()
                .ok_or_else(|| CoreError::InvalidArgument("template cache lacks frame tokens".into()))?;
            let img = srch_img
                .ok_or_else(|| CoreError::InvalidArgument("search image required".into()))?;
            let zt = g.constant(zt_arr.clone());
            let srch = g.constant(img.clone().into_dyn());
            let zs = vit_embed_forward(g, &self.store, &self.ann().embed, srch, TokenRole::Search)?;
            Some(g.concat(1, &[zt, zs]))
        } else {
            None
        };
        let snn_tokens = if self.cfg.has_snn() {
            let zt_arr = cache
                .snn
                .as_ref()
                .ok_or_else(|| CoreError::InvalidArgument("template cache lacks event tokens".into()))?;
            let ev = srch_events
                .ok_or_else(|| CoreError::InvalidArgument("search events required".into()))?;
            let zt = g.constant(zt_arr.clone());
            let srch = g.constant(ev.clone().into_dyn());
            let zs = tokenize_spiking(
                g,
                &self.store,
                &self.snn().tok,
                srch,
                self.cfg.lif(),
                "snn.tok.srch",
                probe,
            )?;
            Some(g.concat(2, &[zt, zs]))
        } else {
            None
        };
        self.forward_from_tokens(g, ann_tokens, snn_tokens, probe)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TemplateTokens {
    pub ann: Option<ArrayD<f64>>,
    pub snn: Option<ArrayD<f64>>,
}

#[derive(Clone, Copy, Debug)]
pub struct TrackOutput {
    /// (5, N_srch): rows are [score logit, off_x, off_y, w, h] raw values.
    pub head_out: Var,
    pub ann_search: Option<Var>,
    pub snn_search: Option<Var>,
}

/// One training pair in crop space.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub tpl_img: Array3<f64>,
    pub srch_img: Array3<f64>,
    /// (T, 3, h, w) binned event frames cropped like the images.
    pub tpl_events: Array4<f64>,
    pub srch_events: Array4<f64>,
    /// Ground truth in search-crop coordinates.
    pub gt: BoundingBox,
}

// ---- box codec ----

/// Flat score-grid cell whose center region contains the ground-truth
/// center, or None when the center falls outside the crop.
pub fn gt_cell(gt: &BoundingBox, grid: usize, stride: f64) -> Option<usize> {
    let cx = gt.cx / stride;
    let cy = gt.cy / stride;
    if cx < 0.0 || cy < 0.0 {
        return None;
    }
    let (ix, iy) = (cx.floor() as usize, cy.floor() as usize);
    if ix >= grid || iy >= grid {
        return None;
    }
    Some(iy * grid + ix)
}

/// Unnormalized Gaussian over cell-index distance, peak exactly 1 at `cell`.
pub fn gaussian_heatmap(grid: usize, cell: usize, sigma: f64) -> Array1<f64> {
    let (py, px) = (cell / grid, cell % grid);
    Array1::from_shape_fn(grid * grid, |i| {
        let (y, x) = ((i / grid) as f64, (i % grid) as f64);
        let d2 = (y - py as f64).powi(2) + (x - px as f64).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    })
}

/// Heatmap width in cells for a box of the given size.
pub fn heatmap_sigma(gt: &BoundingBox, stride: f64) -> f64 {
    (0.15 * (gt.w * gt.h).sqrt() / stride).max(0.75)
}

fn sigmoid_s(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decode the box at the arg-max score cell. Offsets keep the center inside
/// its cell; sizes are fractions of the search crop.
pub fn decode_box(head_out: &ArrayD<f64>, grid: usize, stride: f64) -> Result<BoundingBox> {
    if head_out.ndim() != 2 || head_out.shape()[0] != 5 || head_out.shape()[1] != grid * grid {
        return Err(CoreError::InvalidArgument(format!(
            "head output {:?}, expected (5, {})",
            head_out.shape(),
            grid * grid
        )));
    }
    if head_out.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numerical("non-finite head output".into()));
    }
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..grid * grid {
        let v = head_out[[0, i]];
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    let (cy, cx) = ((best / grid) as f64, (best % grid) as f64);
    let off_x = sigmoid_s(head_out[[1, best]]) - 0.5;
    let off_y = sigmoid_s(head_out[[2, best]]) - 0.5;
    let side = grid as f64 * stride;
    let w = sigmoid_s(head_out[[3, best]]) * side;
    let h = sigmoid_s(head_out[[4, best]]) * side;
    BoundingBox::new(
        (cx + 0.5 + off_x) * stride,
        (cy + 0.5 + off_y) * stride,
        w.max(1e-6),
        h.max(1e-6),
    )
}

/// Generalized IoU of two boxes, in [-1, 1].
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    let cw = ax1.max(bx1) - ax0.min(bx0);
    let ch = ay1.max(by1) - ay0.min(by0);
    let c = cw * ch;
    inter / union - (c - union) / c
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub total: f64,
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
}

/// Training loss for one sample: penalty-reduced focal on the score map plus
/// L1 and generalized-IoU terms at the ground-truth cell. Returns None when
/// the ground-truth center lies outside the search crop.
pub fn training_loss(
    g: &mut Graph,
    cfg: &TrackerConfig,
    out: &TrackOutput,
    gt: &BoundingBox,
) -> Result<Option<(Var, LossParts)>> {
    let grid = cfg.score_grid();
    let stride = cfg.patch as f64;
    let Some(cell) = gt_cell(gt, grid, stride) else {
        return Ok(None);
    };
    let ns = grid * grid;
    let sigma = heatmap_sigma(gt, stride);
    let heat = gaussian_heatmap(grid, cell, sigma);
    // focal terms
    let logits = g.slice_axis(out.head_out, 0, 0, 1);
    let logits = g.reshape(logits, &[ns]);
    let p_raw = g.sigmoid(logits);
    let p = g.clamp(p_raw, 1e-12, 1.0 - 1e-12);
    let mut pos_mask = Array1::<f64>::zeros(ns);
    pos_mask[cell] = 1.0;
    let mut neg_w = heat.mapv(|y| (1.0 - y).powi(FOCAL_BETA as i32));
    neg_w[cell] = 0.0;
    let pos_mask = g.constant(pos_mask.into_dyn());
    let neg_w = g.constant(neg_w.into_dyn());
    let one_minus_p = g.neg(p);
    let one_minus_p = g.add_scalar(one_minus_p, 1.0);
    let log_p = g.log(p);
    let log_1p = g.log(one_minus_p);
    let omp2 = g.mul(one_minus_p, one_minus_p);
    let p2 = g.mul(p, p);
    let pos_term = g.mul(omp2, log_p);
    let pos_term = g.mul(pos_term, pos_mask);
    let neg_term = g.mul(p2, log_1p);
    let neg_term = g.mul(neg_term, neg_w);
    let both = g.add(pos_term, neg_term);
    let sum = g.sum_all(both);
    let focal = g.neg(sum);
    // box terms at the ground-truth cell
    let col = g.slice_axis(out.head_out, 1, cell, cell + 1);
    let row = |g: &mut Graph, r: usize| {
        let v = g.slice_axis(col, 0, r, r + 1);
        g.reshape(v, &[1])
    };
    let (cx_cell, cy_cell) = ((cell % grid) as f64, (cell / grid) as f64);
    let side = grid as f64 * stride;
    let raw_ox = row(g, 1);
    let raw_oy = row(g, 2);
    let raw_w = row(g, 3);
    let raw_h = row(g, 4);
    let sig = |g: &mut Graph, v: Var| g.sigmoid(v);
    let off_x = sig(g, raw_ox);
    let off_x = g.add_scalar(off_x, -0.5);
    let off_y = sig(g, raw_oy);
    let off_y = g.add_scalar(off_y, -0.5);
    let w_frac = sig(g, raw_w);
    let h_frac = sig(g, raw_h);
    let t_off_x = gt.cx / stride - (cx_cell + 0.5);
    let t_off_y = gt.cy / stride - (cy_cell + 0.5);
    let t_w = gt.w / side;
    let t_h = gt.h / side;
    let l1_terms = [
        (off_x, t_off_x),
        (off_y, t_off_y),
        (w_frac, t_w),
        (h_frac, t_h),
    ];
    let mut l1: Option<Var> = None;
    for (v, t) in l1_terms {
        let d = g.add_scalar(v, -t);
        let d = g.abs(d);
        l1 = Some(match l1 {
            Some(acc) => g.add(acc, d),
            None => d,
        });
    }
    let l1 = l1.unwrap();
    let l1 = g.reshape(l1, &[]);
    // decoded box, kept in-graph for the overlap term
    let cx = g.add_scalar(off_x, cx_cell + 0.5);
    let cx = g.scale(cx, stride);
    let cy = g.add_scalar(off_y, cy_cell + 0.5);
    let cy = g.scale(cy, stride);
    let w = g.scale(w_frac, side);
    let h = g.scale(h_frac, side);
    let giou_v = graph_giou(g, [cx, cy, w, h], gt);
    let giou_loss = g.neg(giou_v);
    let giou_loss = g.add_scalar(giou_loss, 1.0);
    let giou_loss = g.reshape(giou_loss, &[]);
    let focal_w = g.scale(focal, LOSS_W_SCORE);
    let l1_w = g.scale(l1, LOSS_W_L1);
    let giou_w = g.scale(giou_loss, LOSS_W_GIOU);
    let total = g.add(focal_w, l1_w);
    let total = g.add(total, giou_w);
    let parts = LossParts {
        total: g.value(total)[[]],
        focal: g.value(focal)[[]],
        l1: g.value(l1)[[]],
        giou: g.value(giou_loss)[[]],
    };
    Ok(Some((total, parts)))
}

/// Differentiable generalized IoU between a predicted box (center-format
/// component Vars, each shape (1,)) and a constant ground truth.
fn graph_giou(g: &mut Graph, pred: [Var; 4], gt: &BoundingBox) -> Var {
    let [cx, cy, w, h] = pred;
    let half_w = g.scale(w, 0.5);
    let half_h = g.scale(h, 0.5);
    let ax0 = g.sub(cx, half_w);
    let ax1 = g.add(cx, half_w);
    let ay0 = g.sub(cy, half_h);
    let ay1 = g.add(cy, half_h);
    let (bx0, by0, bx1, by1) = gt.corners();
    let c = |g: &mut Graph, v: f64| g.constant(Array1::from_elem(1, v).into_dyn());
    let bx0 = c(g, bx0);
    let bx1 = c(g, bx1);
    let by0 = c(g, by0);
    let by1 = c(g, by1);
    let ix0 = g.maximum(ax0, bx0);
    let ix1 = g.minimum(ax1, bx1);
    let iy0 = g.maximum(ay0, by0);
    let iy1 = g.minimum(ay1, by1);
    let iw = g.sub(ix1, ix0);
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);
    let area_a = g.mul(w, h);
    let area_b = gt.w * gt.h;
    let area_b = c(g, area_b);
    let uni = g.add(area_a, area_b);
    let uni = g.sub(uni, inter);
    let ex0 = g.minimum(ax0, bx0);
    let ex1 = g.maximum(ax1, bx1);
    let ey0 = g.minimum(ay0, by0);
    let ey1 = g.maximum(ay1, by1);
    let cw = g.sub(ex1, ex0);
    let ch = g.sub(ey1, ey0);
    let encl = g.mul(cw, ch);
    let iou = g.div(inter, uni);
    let slack = g.sub(encl, uni);
    let penalty = g.div(slack, encl);
    g.sub(iou, penalty)
}

// ---- sequence protocol ----

/// A tracked sequence: canvas frames, their timestamps, the event stream
/// covering the same span, and ground truth per frame.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub frames: Vec<Array3<f64>>,
    pub timestamps: Vec<f64>,
    pub events: EventStream,
    pub gt: Vec<BoundingBox>,
    pub visibility: Vec<bool>,
}

impl Sequence {
    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if self.timestamps.len() != n || self.gt.len() != n || self.visibility.len() != n {
            return Err(CoreError::InvalidArgument(format!(
                "sequence arrays disagree: {} frames, {} timestamps, {} boxes, {} visibility flags",
                n,
                self.timestamps.len(),
                self.gt.len(),
                self.visibility.len()
            )));
        }
        Ok(())
    }
}

/// Events with t in (a, b], binned into `bins` frame tensors on the full
/// canvas. The first frame of a sequence instead uses [a, b) directly via
/// `events_to_frames`.
pub fn bin_window_right_open(
    stream: &EventStream,
    a: f64,
    b: f64,
    bins: usize,
) -> Result<Array4<f64>> {
    let kept: Vec<_> = stream
        .events()
        .iter()
        .filter(|e| e.t > a && e.t <= b)
        .copied()
        .collect();
    let sub = EventStream::new(stream.width, stream.height, kept)?;
    // nudge the end so events at exactly b fall inside the final bin
    let span = b - a;
    let tensor = events_to_frames(&sub, a, b + span * 1e-12, bins)?;
    Ok(tensor.data)
}

/// Run the tracker over a sequence. The first box is the given ground truth;
/// each later frame searches around the previous prediction.
pub fn track_sequence(model: &HybridModel, seq: &Sequence) -> Result<Vec<BoundingBox>> {
    if seq.frames.is_empty() {
        return Ok(Vec::new());
    }
    seq.validate()?;
    let cfg = &model.cfg;
    let (h, w) = {
        let s = seq.frames[0].shape();
        (s[1] as u32, s[2] as u32)
    };
    let t_bins = cfg.time_steps;
    // template from the first frame and its event window
    let (tpl_img, _tpl_aff) = crop_resize_image(
        &seq.frames[0],
        &seq.gt[0],
        cfg.template_context,
        cfg.template_size,
    )?;
    let tpl_window_end = if seq.timestamps.len() > 1 {
        seq.timestamps[1]
    } else {
        seq.timestamps[0] + 1.0
    };
    let tpl_events_canvas =
        events_to_frames(&seq.events, seq.timestamps[0], tpl_window_end, t_bins)?.data;
    let (tpl_events, _) = crop_resize_events(
        &tpl_events_canvas,
        &seq.gt[0],
        cfg.template_context,
        cfg.template_size,
    )?;
    let cache = model.encode_template(&tpl_img, &tpl_events)?;
    let mut prev = seq.gt[0];
    let mut out = vec![prev];
    for i in 1..seq.frames.len() {
        let (srch_img, aff) =
            crop_resize_image(&seq.frames[i], &prev, cfg.search_context, cfg.search_size)?;
        let ev_canvas =
            bin_window_right_open(&seq.events, seq.timestamps[i - 1], seq.timestamps[i], t_bins)?;
        let (srch_events, _) =
            crop_resize_events(&ev_canvas, &prev, cfg.search_context, cfg.search_size)?;
        let mut g = Graph::new();
        let mut probe = Probe::off();
        let outv = model.forward_search(
            &mut g,
            &cache,
            Some(&srch_img).filter(|_| cfg.has_ann()),
            Some(&srch_events).filter(|_| cfg.has_snn()),
            &mut probe,
        )?;
        let head = g.value(outv.head_out).clone();
        let crop_box = decode_box(&head, cfg.score_grid(), cfg.patch as f64)?;
        let canvas_box = aff.to_canvas(&crop_box);
        let bw = canvas_box.w.clamp(2.0, w as f64);
        let bh = canvas_box.h.clamp(2.0, h as f64);
        let bx = canvas_box.cx.clamp(0.0, w as f64 - 1.0);
        let by = canvas_box.cy.clamp(0.0, h as f64 - 1.0);
        prev = BoundingBox::new(bx, by, bw, bh)?;
        out.push(prev);
    }
    Ok(out)
}
