//! Run configuration: the full model configuration plus training
//! hyperparameters, read from TOML. `template` emits a fully commented file
//! so every key is documented next to its default.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use evtrack_core::tracker::TrackerConfig;
use serde::{Deserialize, Serialize};

use crate::dataset::SplitKind;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate for all groups.
    pub lr: f64,
    /// Learning rate for warm-started backbone parameters.
    pub warm_lr: f64,
    /// L2 weight decay folded into the gradient.
    pub weight_decay: f64,
    /// Fraction of epochs after which the rate drops.
    pub decay_at: f64,
    /// Multiplier applied at the decay point.
    pub decay_factor: f64,
    pub seed: u64,
    /// Splits drawn from during training.
    pub splits: Vec<String>,
    /// Center jitter of the search crop, as a fraction of target size.
    pub jitter: f64,
    /// Pairs drawn per epoch; 0 uses every template/search pair once.
    pub pairs_per_epoch: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 1e-4,
            warm_lr: 1e-5,
            weight_decay: 1e-4,
            decay_at: 0.8,
            decay_factor: 0.1,
            seed: 7,
            splits: SplitKind::ALL.iter().map(|s| s.as_str().to_string()).collect(),
            jitter: 0.3,
            pairs_per_epoch: 0,
        }
    }
}

impl TrainParams {
    pub fn split_kinds(&self) -> Result<Vec<SplitKind>> {
        self.splits
            .iter()
            .map(|s| SplitKind::parse(s).with_context(|| format!("unknown split {s}")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            bail!("epochs and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.warm_lr > 0.0) {
            bail!("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.decay_at) || !(self.decay_factor > 0.0) {
            bail!("invalid decay schedule");
        }
        if self.splits.is_empty() {
            bail!("at least one training split required");
        }
        self.split_kinds()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: TrackerConfig,
    #[serde(default)]
    pub train: TrainParams,
}

impl RunConfig {
    pub fn toy() -> Self {
        Self { model: TrackerConfig::toy(), train: TrainParams::default() }
    }

    pub fn full() -> Self {
        Self { model: TrackerConfig::full(), train: TrainParams::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: RunConfig = toml::from_str(&raw).context("malformed config")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn preset(name: &str) -> Result<RunConfig> {
    match name {
        "toy" => Ok(RunConfig::toy()),
        "full" => Ok(RunConfig::full()),
        other => bail!("unknown preset {other}; expected toy or full"),
    }
}

/// A commented config file matching the named preset's defaults.
pub fn template(name: &str) -> Result<String> {
    let cfg = preset(name)?;
    let m = &cfg.model;
    let t = &cfg.train;
    let splits = t
        .splits
        .iter()
        .map(|s| format!("\"{s}\""))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(format!(
        r#"# Tracker run configuration ({name} preset). Every key is required
# unless marked optional; values shown are the preset defaults.

[model]
# hybrid | rgb_only | event_only
modality = "{modality}"
# channel widths of the frame and event branches
ann_dim = {ann_dim}
snn_dim = {snn_dim}
# sparse-code length inside each adapter
code_dim = {code_dim}
# encoder depths; event depth must not exceed frame depth
ann_depth = {ann_depth}
snn_depth = {snn_depth}
# number of layer pairs that carry adapters
fusion_layers = {fusion_layers}
# first_layers | last_layers
placement = "{placement}"
# both | event_to_rgb | rgb_to_event | none
directions = "{directions}"
# single_chain | per_stage: how adapter codes thread through the stages
chaining = "{chaining}"
# feed stage-2 adapters the layer inputs instead of stage-1 outputs
literal_stage_wiring = {literal}
heads = {heads}
ann_mlp_hidden = {ann_mlp_hidden}
snn_mlp_hidden = {snn_mlp_hidden}
# token-axis kernel width of the event branch MLP convs (odd)
snn_mlp_kernel = {snn_mlp_kernel}
head_hidden = {head_hidden}
# event bins per frame interval
time_steps = {time_steps}
patch = {patch}
template_size = {template_size}
search_size = {search_size}
# collapse event-side codes over steps with temporal attention
tda_enabled = {tda}
# average thresholded and unthresholded adapter codes
skip_average = {skip}
lif_tau = {lif_tau}
lif_v_th = {lif_v_th}
# hard | relaxed (relaxed is for gradient diagnostics only)
spike_mode = "{spike_mode}"
template_context = {template_context}
search_context = {search_context}

[train]
epochs = {epochs}
batch_size = {batch_size}
lr = {lr}
# used for parameters loaded via --warm-start
warm_lr = {warm_lr}
weight_decay = {weight_decay}
# learning rate drops to decay_factor * lr after decay_at * epochs
decay_at = {decay_at}
decay_factor = {decay_factor}
seed = {seed}
# benchmark splits sampled during training
splits = [{splits}]
# search-crop center jitter as a fraction of target size
jitter = {jitter}
# pairs drawn per epoch; 0 uses every template/search pair once
pairs_per_epoch = {pairs_per_epoch}
"#,
        name = name,
        modality = toml_enum(&m.modality)?,
        ann_dim = m.ann_dim,
        snn_dim = m.snn_dim,
        code_dim = m.code_dim,
        ann_depth = m.ann_depth,
        snn_depth = m.snn_depth,
        fusion_layers = m.fusion_layers,
        placement = toml_enum(&m.placement)?,
        directions = toml_enum(&m.directions)?,
        chaining = toml_enum(&m.chaining)?,
        literal = m.literal_stage_wiring,
        heads = m.heads,
        ann_mlp_hidden = m.ann_mlp_hidden,
        snn_mlp_hidden = m.snn_mlp_hidden,
        snn_mlp_kernel = m.snn_mlp_kernel,
        head_hidden = m.head_hidden,
        time_steps = m.time_steps,
        patch = m.patch,
        template_size = m.template_size,
        search_size = m.search_size,
        tda = m.tda_enabled,
        skip = m.skip_average,
        lif_tau = m.lif_tau,
        lif_v_th = m.lif_v_th,
        spike_mode = toml_enum(&m.spike_mode)?,
        template_context = m.template_context,
        search_context = m.search_context,
        epochs = t.epochs,
        batch_size = t.batch_size,
        lr = t.lr,
        warm_lr = t.warm_lr,
        weight_decay = t.weight_decay,
        decay_at = t.decay_at,
        decay_factor = t.decay_factor,
        seed = t.seed,
        splits = splits,
        jitter = t.jitter,
        pairs_per_epoch = t.pairs_per_epoch,
    ))
}

/// Serde snake_case token of a unit enum variant.
fn toml_enum<T: Serialize>(v: &T) -> Result<String> {
    match serde_json::to_value(v)? {
        serde_json::Value::String(s) => Ok(s),
        other => bail!("expected enum token, got {other}"),
    }
}
