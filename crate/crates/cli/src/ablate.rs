//! Ablation harness: sweeps adapter direction, adapter count, placement,
//! and event time steps; each variant is trained with the shared recipe,
//! evaluated on the easy test split, and costed. Duplicate configurations
//! across axes (the shared baseline) are trained once.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::SplitKind;
use crate::runner::{energy_for_model, track_and_eval_splits};
use crate::train;
use evtrack_core::tracker::{AdapterPlacement, FusionDirections, TrackerConfig};

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub directions: String,
    pub fusion_layers: usize,
    pub placement: String,
    pub time_steps: usize,
    pub sr_auc: f64,
    pub pr20: f64,
    pub npr02: f64,
    pub e_ann_mj: f64,
    pub e_snn_mj: f64,
    pub e_total_mj: f64,
}

pub struct AblateOutcome {
    pub table_csv: PathBuf,
    pub table_txt: PathBuf,
    pub rows: Vec<AblationRow>,
}

fn enum_token<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_else(|| "?".into())
}

fn slug(cfg: &TrackerConfig) -> String {
    format!(
        "dir_{}_k{}_{}_t{}",
        enum_token(&cfg.directions),
        cfg.fusion_layers,
        enum_token(&cfg.placement),
        cfg.time_steps
    )
}

/// The swept variants: (axis, label, config). The baseline appears once per
/// axis so the table reads like four self-contained comparisons.
fn variants(base: &TrackerConfig) -> Vec<(String, String, TrackerConfig)> {
    let mut out = Vec::new();
    for d in [
        FusionDirections::Both,
        FusionDirections::EventToRgb,
        FusionDirections::RgbToEvent,
        FusionDirections::None,
    ] {
        let mut c = *base;
        c.directions = d;
        if matches!(d, FusionDirections::None) {
            c.fusion_layers = 0;
        }
        out.push(("direction".into(), enum_token(&d), c));
    }
    for k in [0usize, 2, 4] {
        let mut c = *base;
        c.fusion_layers = k;
        if k == 0 {
            c.directions = FusionDirections::None;
        }
        out.push(("adapters".into(), format!("k{k}"), c));
    }
    for p in [AdapterPlacement::FirstLayers, AdapterPlacement::LastLayers] {
        let mut c = *base;
        c.placement = p;
        out.push(("placement".into(), enum_token(&p), c));
    }
    for t in [1usize, 3] {
        let mut c = *base;
        c.time_steps = t;
        out.push(("time_steps".into(), format!("t{t}"), c));
    }
    out
}

pub fn ablate(
    run: &RunConfig,
    data_root: &Path,
    out_dir: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<AblateOutcome> {
    fs::create_dir_all(out_dir)?;
    // deep enough on the event side for the largest adapter count
    let mut base = run.model;
    base.snn_depth = base.ann_depth;
    base.validate()?;

    struct Done {
        sr_auc: f64,
        pr20: f64,
        npr02: f64,
        e_ann: f64,
        e_snn: f64,
        e_total: f64,
    }
    let mut cache: HashMap<String, Done> = HashMap::new();
    let mut rows = Vec::new();
    for (axis, variant, cfg) in variants(&base) {
        let key = slug(&cfg);
        if !cache.contains_key(&key) {
            log(&format!("training variant {key}"));
            let mut vr = run.clone();
            vr.model = cfg;
            let vdir = out_dir.join("runs").join(&key);
            let outcome = train::train(&vr, data_root, &vdir, None, &mut |m| {
                log(&format!("  {m}"))
            })?;
            let (model, _) = checkpoint::load(&outcome.checkpoint)?;
            let eval = track_and_eval_splits(&model, data_root, &[SplitKind::Easy], None)?;
            let energy = energy_for_model(&model, Some(data_root), 2)?;
            cache.insert(
                key.clone(),
                Done {
                    sr_auc: eval.sr_auc,
                    pr20: eval.pr20,
                    npr02: eval.npr02,
                    e_ann: energy.report.e_ann_mj(),
                    e_snn: energy.report.e_snn_mj(),
                    e_total: energy.report.e_total_mj(),
                },
            );
        }
        let d = &cache[&key];
        rows.push(AblationRow {
            axis,
            variant,
            directions: enum_token(&cfg.directions),
            fusion_layers: cfg.fusion_layers,
            placement: enum_token(&cfg.placement),
            time_steps: cfg.time_steps,
            sr_auc: d.sr_auc,
            pr20: d.pr20,
            npr02: d.npr02,
            e_ann_mj: d.e_ann,
            e_snn_mj: d.e_snn,
            e_total_mj: d.e_total,
        });
    }

    let table_csv = out_dir.join("ablation.csv");
    let mut csv = String::from(
        "axis,variant,directions,fusion_layers,placement,time_steps,sr_auc,pr20,npr02,e_ann_mj,e_snn_mj,e_total_mj\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.axis,
            r.variant,
            r.directions,
            r.fusion_layers,
            r.placement,
            r.time_steps,
            r.sr_auc,
            r.pr20,
            r.npr02,
            r.e_ann_mj,
            r.e_snn_mj,
            r.e_total_mj
        ));
    }
    fs::write(&table_csv, &csv)?;

    let table_txt = out_dir.join("ablation.txt");
    let mut txt = format!(
        "{:<11} {:<14} {:>7} {:>7} {:>7} {:>11}\n",
        "axis", "variant", "SR_AUC", "PR20", "NPR02", "E_total(mJ)"
    );
    for r in &rows {
        txt.push_str(&format!(
            "{:<11} {:<14} {:>7.3} {:>7.3} {:>7.3} {:>11.4}\n",
            r.axis, r.variant, r.sr_auc, r.pr20, r.npr02, r.e_total_mj
        ));
    }
    fs::write(&table_txt, &txt)?;
    Ok(AblateOutcome { table_csv, table_txt, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_set_covers_all_axes_and_dedups_to_seven_runs() {
        let base = TrackerConfig { snn_depth: 4, ..TrackerConfig::toy() };
        let v = variants(&base);
        assert_eq!(v.len(), 11);
        for (_, _, c) in &v {
            c.validate().unwrap();
        }
        let distinct: std::collections::HashSet<String> =
            v.iter().map(|(_, _, c)| slug(c)).collect();
        assert_eq!(distinct.len(), 7);
        let axes: std::collections::HashSet<&str> =
            v.iter().map(|(a, _, _)| a.as_str()).collect();
        assert_eq!(axes.len(), 4);
    }
}
