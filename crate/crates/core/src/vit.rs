//! Frame branch: patch embedding with separate template/search positional
//! encodings and pre-norm transformer blocks (multi-head softmax attention,
//! GELU MLP). Tokens are stored as columns of an (M, N) matrix.

use ndarray::ArrayD;

use crate::graph::{Graph, Var};
use crate::params::{trunc_normal, ParamGroup, ParamId, ParamStore};
use crate::{CoreError, Result};

pub const LN_EPS: f64 = 1e-6;

/// Patch projection shared by both inputs; each input adds its own
/// positional table.
#[derive(Clone, Debug)]
pub struct VitEmbed {
    pub proj: ParamId,
    pub pos_tpl: ParamId,
    pub pos_srch: ParamId,
    pub patch: usize,
}

pub fn new_vit_embed(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    dim: usize,
    patch: usize,
    n_tpl: usize,
    n_srch: usize,
    rng: &mut impl rand::Rng,
) -> VitEmbed {
    VitEmbed {
        proj: store.add(
            format!("{name}.proj"),
            ParamGroup::AnnBackbone,
            trunc_normal(&[dim, c_in * patch * patch], 0.02, rng),
        ),
        pos_tpl: store.add(
            format!("{name}.pos_tpl"),
            ParamGroup::AnnBackbone,
            trunc_normal(&[dim, n_tpl], 0.02, rng),
        ),
        pos_srch: store.add(
            format!("{name}.pos_srch"),
            ParamGroup::AnnBackbone,
            trunc_normal(&[dim, n_srch], 0.02, rng),
        ),
        patch,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    Template,
    Search,
}

/// (C, H, W) image to (dim, tokens) with the role's positional table added.
pub fn vit_embed_forward(
    g: &mut Graph,
    store: &ParamStore,
    ve: &VitEmbed,
    img: Var,
    role: TokenRole,
) -> Result<Var> {
    let shape = g.value(img).shape().to_vec();
    if shape.len() != 3 {
        return Err(CoreError::InvalidArgument(format!(
            "embed expects (C, H, W), got {shape:?}"
        )));
    }
    if shape[1] % ve.patch != 0 || shape[2] % ve.patch != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "input {}x{} not divisible by patch {}",
            shape[1], shape[2], ve.patch
        )));
    }
    let n = (shape[1] / ve.patch) * (shape[2] / ve.patch);
    let pos_id = match role {
        TokenRole::Template => ve.pos_tpl,
        TokenRole::Search => ve.pos_srch,
    };
    let expect = store.value(pos_id).shape()[1];
    if n != expect {
        return Err(CoreError::InvalidArgument(format!(
            "{role:?} produces {n} tokens but positional table holds {expect}"
        )));
    }
    let w = g.param(store, ve.proj);
    let e = g.patch_embed(w, img, ve.patch);
    let pos = g.param(store, pos_id);
    Ok(g.add(e, pos))
}

/// Multi-head softmax attention; heads are contiguous row slices of the
/// shared Q/K/V projections.
#[derive(Clone, Debug)]
pub struct Msa {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

pub fn new_msa(
    store: &mut ParamStore,
    name: &str,
    dim: usize,
    heads: usize,
    rng: &mut impl rand::Rng,
) -> Msa {
    assert!(dim % heads == 0, "dim must divide into heads");
    let mk = |store: &mut ParamStore, tag: &str, rng: &mut dyn rand::RngCore| {
        store.add(
            format!("{name}.{tag}"),
            ParamGroup::AnnBackbone,
            trunc_normal(&[dim, dim], 0.02, rng),
        )
    };
    Msa {
        wq: mk(store, "wq", rng),
        wk: mk(store, "wk", rng),
        wv: mk(store, "wv", rng),
        wo: mk(store, "wo", rng),
        heads,
    }
}

pub fn msa_forward(g: &mut Graph, store: &ParamStore, msa: &Msa, x: Var) -> Var {
    let dim = g.value(x).shape()[0];
    let dh = dim / msa.heads;
    let wq = g.param(store, msa.wq);
    let wk = g.param(store, msa.wk);
    let wv = g.param(store, msa.wv);
    let q = g.linear(wq, x);
    let k = g.linear(wk, x);
    let v = g.linear(wv, x);
    let mut heads = Vec::with_capacity(msa.heads);
    for h in 0..msa.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_axis(q, 0, lo, hi);
        let kh = g.slice_axis(k, 0, lo, hi);
        let vh = g.slice_axis(v, 0, lo, hi);
        let s = g.gram(qh, kh);
        let s = g.scale(s, 1.0 / (dh as f64).sqrt());
        let a = g.softmax_rows(s);
        heads.push(g.attn_out(vh, a));
    }
    let cat = g.concat(0, &heads);
    let wo = g.param(store, msa.wo);
    g.linear(wo, cat)
}

/// Two-layer GELU MLP with biases.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub fn new_mlp(
    store: &mut ParamStore,
    name: &str,
    dim: usize,
    hidden: usize,
    rng: &mut impl rand::Rng,
) -> Mlp {
    Mlp {
        w1: store.add(
            format!("{name}.w1"),
            ParamGroup::AnnBackbone,
            trunc_normal(&[hidden, dim], 0.02, rng),
        ),
        b1: store.add(
            format!("{name}.b1"),
            ParamGroup::AnnBackbone,
            ArrayD::zeros(ndarray::IxDyn(&[hidden, 1])),
        ),
        w2: store.add(
            format!("{name}.w2"),
            ParamGroup::AnnBackbone,
            trunc_normal(&[dim, hidden], 0.02, rng),
        ),
        b2: store.add(
            format!("{name}.b2"),
            ParamGroup::AnnBackbone,
            ArrayD::zeros(ndarray::IxDyn(&[dim, 1])),
        ),
    }
}

pub fn mlp_forward(g: &mut Graph, store: &ParamStore, mlp: &Mlp, x: Var) -> Var {
    let w1 = g.param(store, mlp.w1);
    let b1 = g.param(store, mlp.b1);
    let h = g.linear(w1, x);
    let h = g.add(h, b1);
    let h = g.gelu(h);
    let w2 = g.param(store, mlp.w2);
    let b2 = g.param(store, mlp.b2);
    let o = g.linear(w2, h);
    g.add(o, b2)
}

/// Pre-norm transformer block: x + MSA(LN(x)), then + MLP(LN(.)).
#[derive(Clone, Debug)]
pub struct VitBlock {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub msa: Msa,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub mlp: Mlp,
}

pub fn new_vit_block(
    store: &mut ParamStore,
    name: &str,
    dim: usize,
    heads: usize,
    hidden: usize,
    rng: &mut impl rand::Rng,
) -> VitBlock {
    let ones = ArrayD::from_elem(ndarray::IxDyn(&[dim]), 1.0);
    let zeros = ArrayD::zeros(ndarray::IxDyn(&[dim]));
    VitBlock {
        ln1_g: store.add(format!("{name}.ln1.gamma"), ParamGroup::AnnBackbone, ones.clone()),
        ln1_b: store.add(format!("{name}.ln1.beta"), ParamGroup::AnnBackbone, zeros.clone()),
        msa: new_msa(store, &format!("{name}.msa"), dim, heads, rng),
        ln2_g: store.add(format!("{name}.ln2.gamma"), ParamGroup::AnnBackbone, ones),
        ln2_b: store.add(format!("{name}.ln2.beta"), ParamGroup::AnnBackbone, zeros),
        mlp: new_mlp(store, &format!("{name}.mlp"), dim, hidden, rng),
    }
}

/// The attention half of a block: x + MSA(LN(x)).
pub fn vit_block_attn(g: &mut Graph, store: &ParamStore, blk: &VitBlock, x: Var) -> Var {
    let g1 = g.param(store, blk.ln1_g);
    let b1 = g.param(store, blk.ln1_b);
    let n1 = g.layer_norm(x, g1, b1, LN_EPS);
    let att = msa_forward(g, store, &blk.msa, n1);
    g.add(x, att)
}

/// The MLP half of a block: x + MLP(LN(x)).
pub fn vit_block_mlp(g: &mut Graph, store: &ParamStore, blk: &VitBlock, x: Var) -> Var {
    let g2 = g.param(store, blk.ln2_g);
    let b2 = g.param(store, blk.ln2_b);
    let n2 = g.layer_norm(x, g2, b2, LN_EPS);
    let ff = mlp_forward(g, store, &blk.mlp, n2);
    g.add(x, ff)
}

pub fn vit_block_forward(g: &mut Graph, store: &ParamStore, blk: &VitBlock, x: Var) -> Var {
    let x1 = vit_block_attn(g, store, blk, x);
    vit_block_mlp(g, store, blk, x1)
}
