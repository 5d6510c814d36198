//! Training loop: Adam over batch-accumulated tapes, per-group learning
//! rates for warm-started parameters, a step decay late in the run, and a
//! hard abort (with a diagnostic dump) the moment anything goes non-finite.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evtrack_core::energy::Probe;
use evtrack_core::eventsim::{crop_resize_events, crop_resize_image, events_to_frames, BoundingBox};
use evtrack_core::graph::Graph;
use evtrack_core::params::{GradStore, ParamGroup, ParamStore};
use evtrack_core::tracker::{
    bin_window_right_open, training_loss, HybridModel, PairSample, Sequence,
};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, SplitKind};
use crate::plots::{self, Series};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction; weight decay enters as an L2 gradient term.
pub struct Adam {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<ArrayD<f64>> = store
            .iter()
            .map(|(_, e)| ArrayD::zeros(e.value.raw_dim()))
            .collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update. `lrs[i]` is the rate for parameter index i; a missing
    /// gradient is treated as zero (the parameter still feels decay).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradStore,
        lrs: &[f64],
        weight_decay: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let i = id.index();
            let grad = grads.get(id).cloned();
            let w = store.value_mut(id);
            let n = w.len();
            let ws = w.as_slice_mut().expect("contiguous parameter");
            let ms = self.m[i].as_slice_mut().expect("contiguous state");
            let vs = self.v[i].as_slice_mut().expect("contiguous state");
            let gs = grad.as_ref().map(|g| g.as_slice().expect("contiguous grad"));
            for k in 0..n {
                let g = gs.map_or(0.0, |g| g[k]) + weight_decay * ws[k];
                ms[k] = BETA1 * ms[k] + (1.0 - BETA1) * g;
                vs[k] = BETA2 * vs[k] + (1.0 - BETA2) * g * g;
                let mhat = ms[k] / bc1;
                let vhat = vs[k] / bc2;
                ws[k] -= lrs[i] * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Template from frame 0 plus a jittered search crop around frame `idx`'s
/// ground truth. Ground truth is returned in search-crop coordinates.
pub fn build_pair(
    seq: &Sequence,
    idx: usize,
    model: &HybridModel,
    jitter: f64,
    rng: &mut ChaCha12Rng,
) -> Result<PairSample> {
    let cfg = &model.cfg;
    if idx == 0 || idx >= seq.frames.len() {
        bail!("search frame {idx} out of range");
    }
    let t_bins = cfg.time_steps;
    let (tpl_img, _) = crop_resize_image(
        &seq.frames[0],
        &seq.gt[0],
        cfg.template_context,
        cfg.template_size,
    )?;
    let tpl_end = if seq.timestamps.len() > 1 {
        seq.timestamps[1]
    } else {
        seq.timestamps[0] + 1.0
    };
    let tpl_canvas = events_to_frames(&seq.events, seq.timestamps[0], tpl_end, t_bins)?.data;
    let (tpl_events, _) = crop_resize_events(
        &tpl_canvas,
        &seq.gt[0],
        cfg.template_context,
        cfg.template_size,
    )?;

    let gt = seq.gt[idx];
    let scale = 1.0 + rng.gen_range(-jitter / 2.0..=jitter / 2.0);
    let center = BoundingBox::new(
        gt.cx + rng.gen_range(-jitter..=jitter) * gt.w,
        gt.cy + rng.gen_range(-jitter..=jitter) * gt.h,
        gt.w * scale,
        gt.h * scale,
    )?;
    let (srch_img, aff) =
        crop_resize_image(&seq.frames[idx], &center, cfg.search_context, cfg.search_size)?;
    let ev_canvas = bin_window_right_open(
        &seq.events,
        seq.timestamps[idx - 1],
        seq.timestamps[idx],
        t_bins,
    )?;
    let (srch_events, _) =
        crop_resize_events(&ev_canvas, &center, cfg.search_context, cfg.search_size)?;
    Ok(PairSample {
        tpl_img,
        srch_img,
        tpl_events,
        srch_events,
        gt: aff.to_crop(&gt),
    })
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
    pub steps: usize,
}

/// Load every training sequence of the requested splits into memory.
pub fn load_training_set(data_root: &Path, splits: &[SplitKind]) -> Result<Vec<Sequence>> {
    let manifest = dataset::load_manifest(data_root)?;
    let rels = dataset::split_paths(&manifest, splits, false);
    let mut seqs = Vec::with_capacity(rels.len());
    for rel in &rels {
        let dir = data_root.join(rel.as_str());
        seqs.push(dataset::load_sequence(&dir).with_context(|| format!("loading {rel}"))?);
    }
    if seqs.is_empty() {
        bail!("no training sequences found under {}", data_root.display());
    }
    Ok(seqs)
}

/// Copy same-name, same-shape parameters from a checkpoint into `model`;
/// returns the indices that were overwritten.
pub fn warm_start(model: &mut HybridModel, path: &Path) -> Result<HashSet<usize>> {
    let (donor, _) = checkpoint::load(path)?;
    let mut warm = HashSet::new();
    let names: Vec<(String, usize)> = model
        .store
        .iter()
        .map(|(id, e)| (e.name.clone(), id.index()))
        .collect();
    for (name, idx) in names {
        let Some(src) = donor.store.find(&name) else { continue };
        let value = donor.store.value(src).clone();
        let id = model.store.find(&name).expect("own name");
        if model.store.value(id).shape() != value.shape() {
            continue;
        }
        *model.store.value_mut(id) = value;
        warm.insert(idx);
    }
    if warm.is_empty() {
        bail!("warm start matched no parameters");
    }
    Ok(warm)
}

fn dump_abort(
    out_dir: &Path,
    epoch: usize,
    step: usize,
    parts: &[f64; 4],
    model: &HybridModel,
    grads: &GradStore,
) -> PathBuf {
    let mut lines = vec![
        format!("non-finite training signal at epoch {epoch} step {step}"),
        format!(
            "loss={} focal={} l1={} giou={}",
            parts[0], parts[1], parts[2], parts[3]
        ),
    ];
    for g in ParamGroup::ALL {
        lines.push(format!(
            "grad_norm[{}]={}",
            g.as_str(),
            grads.group_norm(&model.store, g)
        ));
    }
    let path = out_dir.join("abort_dump.txt");
    let _ = fs::write(&path, lines.join("\n"));
    path
}

pub fn train(
    run: &RunConfig,
    data_root: &Path,
    out_dir: &Path,
    warm: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    run.validate()?;
    fs::create_dir_all(out_dir)?;
    let seqs = load_training_set(data_root, &run.train.split_kinds()?)?;

    let mut model = HybridModel::new(run.model, run.train.seed)?;
    let warm_ids = match warm {
        Some(p) => warm_start(&mut model, p)?,
        None => HashSet::new(),
    };
    let lr_of = |idx: usize, mult: f64| {
        let base = if warm_ids.contains(&idx) { run.train.warm_lr } else { run.train.lr };
        base * mult
    };

    // every (sequence, search frame) pair
    let mut all_pairs: Vec<(usize, usize)> = Vec::new();
    for (si, s) in seqs.iter().enumerate() {
        for fi in 1..s.frames.len() {
            if s.visibility[fi] {
                all_pairs.push((si, fi));
            }
        }
    }
    if all_pairs.is_empty() {
        bail!("no usable training pairs");
    }
    let per_epoch = if run.train.pairs_per_epoch == 0 {
        all_pairs.len()
    } else {
        run.train.pairs_per_epoch.min(all_pairs.len())
    };

    let mut rng = ChaCha12Rng::seed_from_u64(run.train.seed ^ 0x7261_696e);
    let mut opt = Adam::new(&model.store);
    let n_params = model.store.len();
    let decay_epoch = (run.train.decay_at * run.train.epochs as f64).floor() as usize;

    let loss_csv = out_dir.join("loss.csv");
    let mut csv = fs::File::create(&loss_csv)?;
    writeln!(csv, "epoch,step,loss,focal,l1,giou,lr")?;

    let mut epoch_means: Vec<f64> = Vec::new();
    let mut steps_done = 0usize;
    for epoch in 0..run.train.epochs {
        let mult = if epoch >= decay_epoch { run.train.decay_factor } else { 1.0 };
        let lrs: Vec<f64> = (0..n_params).map(|i| lr_of(i, mult)).collect();
        let mut order = all_pairs.clone();
        order.shuffle(&mut rng);
        order.truncate(per_epoch);
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0usize;
        for (step, chunk) in order.chunks(run.train.batch_size).enumerate() {
            let mut grads = GradStore::zeros_like(&model.store);
            let mut batch = [0.0f64; 4];
            let mut used = 0usize;
            for &(si, fi) in chunk {
                let sample = build_pair(&seqs[si], fi, &model, run.train.jitter, &mut rng)?;
                let mut g = Graph::new();
                let mut probe = Probe::off();
                let out = model.forward_pair(&mut g, &sample, &mut probe)?;
                let Some((loss, parts)) = training_loss(&mut g, &model.cfg, &out, &sample.gt)?
                else {
                    continue;
                };
                let tape = g.backward(loss);
                for &(id, var) in g.bound_params() {
                    if let Some(gr) = tape.of(var) {
                        grads.accumulate(id, gr);
                    }
                }
                batch[0] += parts.total;
                batch[1] += parts.focal;
                batch[2] += parts.l1;
                batch[3] += parts.giou;
                used += 1;
                if !parts.total.is_finite() {
                    let dump = dump_abort(out_dir, epoch, step, &batch, &model, &grads);
                    bail!("non-finite loss; diagnostics in {}", dump.display());
                }
            }
            if used == 0 {
                continue;
            }
            let inv = 1.0 / used as f64;
            grads.scale(inv);
            for v in batch.iter_mut() {
                *v *= inv;
            }
            if !grads.all_finite() {
                let dump = dump_abort(out_dir, epoch, step, &batch, &model, &grads);
                bail!("non-finite gradient; diagnostics in {}", dump.display());
            }
            opt.step(&mut model.store, &grads, &lrs, run.train.weight_decay);
            writeln!(
                csv,
                "{epoch},{step},{},{},{},{},{}",
                batch[0],
                batch[1],
                batch[2],
                batch[3],
                run.train.lr * mult
            )?;
            epoch_sum += batch[0];
            epoch_n += 1;
            steps_done += 1;
        }
        let mean = if epoch_n > 0 { epoch_sum / epoch_n as f64 } else { f64::NAN };
        epoch_means.push(mean);
        log(&format!("epoch {epoch}: mean loss {mean:.4}"));
    }
    drop(csv);

    let ckpt = out_dir.join("checkpoint.json");
    checkpoint::save(&ckpt, &model, run.train.seed)?;
    let curve: Vec<(f64, f64)> = epoch_means
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, &v)| (i as f64, v))
        .collect();
    if !curve.is_empty() {
        plots::line_plot(&out_dir.join("loss.png"), &[Series::new("mean epoch loss", curve)])?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        loss_csv,
        first_epoch_loss: *epoch_means.first().unwrap_or(&f64::NAN),
        last_epoch_loss: *epoch_means.last().unwrap_or(&f64::NAN),
        steps: steps_done,
    })
}
