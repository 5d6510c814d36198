//! Energy accounting: per-op multiply-accumulate and accumulate-only counts,
//! measured firing rates, and the picojoule cost model
//! E = 4.6 pJ * sum(MAC) + 0.9 pJ * sum(AC * firing_rate).
//!
//! Counting is split in two: static peak op counts derived from layer shapes
//! ([`count_ops`]), and firing rates measured on real inputs through a
//! [`Probe`] the forward passes fill in ([`measure_firing_rates`]). The two
//! sides join on layer names in [`estimate_energy`].
//!
//! Conventions: dense algebra on real-valued inputs is MAC; layers driven by
//! binary spikes (convs after neurons, the Q^T K and S V attention products)
//! are AC scaled by the measured firing rate; the output conv that consumes
//! the real-valued attention map is MAC; elementwise work (norms, neuron
//! updates, activations, residuals, biases, pooling) is MAC at cost 1 per
//! element. Adapters and the head are real-valued and billed to the frame
//! branch subtotal.

use serde::Serialize;

use crate::graph::Var;
use crate::tracker::{HybridModel, PairSample, TrackerConfig};
use crate::{CoreError, Result};

/// Energy per 32-bit multiply-accumulate, picojoules.
pub const E_MAC_PJ: f64 = 4.6;
/// Energy per 32-bit accumulate, picojoules.
pub const E_AC_PJ: f64 = 0.9;

/// Total energy in millijoules for given MAC and synaptic-op counts.
pub fn energy_mj(macs: f64, syops: f64) -> f64 {
    (macs * E_MAC_PJ + syops * E_AC_PJ) * 1e-9
}

/// Collects named firing rates and intermediate tensors during a forward
/// pass. An inactive probe records nothing.
#[derive(Debug, Default)]
pub struct Probe {
    active: bool,
    rates: Vec<(String, f64)>,
    tensors: Vec<(String, Var)>,
}

impl Probe {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn on() -> Self {
        Self { active: true, ..Self::default() }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    /// Record the firing rate (actual accumulates over peak) feeding a
    /// synaptic op.
    pub fn rate(&mut self, name: impl Into<String>, fr: f64) {
        if self.active {
            self.rates.push((name.into(), fr));
        }
    }

    pub fn tensor(&mut self, name: impl Into<String>, v: Var) {
        if self.active {
            self.tensors.push((name.into(), v));
        }
    }

    pub fn rates(&self) -> &[(String, f64)] {
        &self.rates
    }

    pub fn tensors(&self) -> &[(String, Var)] {
        &self.tensors
    }

    pub fn find_rate(&self, name: &str) -> Option<f64> {
        self.rates.iter().find(|(n, _)| n == name).map(|(_, r)| *r)
    }

    pub fn find_tensor(&self, name: &str) -> Option<Var> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Ann,
    Snn,
    Adapter,
    Head,
}

/// Peak operation counts for one layer of the forward pass.
#[derive(Clone, Debug, Serialize)]
pub struct OpRow {
    pub layer: String,
    pub branch: Branch,
    /// Dense multiply-accumulates per forward.
    pub op_mac: f64,
    /// Spike-driven accumulates per forward at 100% firing.
    pub op_ac: f64,
    /// Probe key supplying the firing rate; required when op_ac > 0.
    pub rate_key: Option<String>,
}

impl OpRow {
    pub fn is_synaptic(&self) -> bool {
        self.op_ac > 0.0
    }

    /// Conventional floating-point op count: one MAC = 2 FLOPs.
    pub fn flops(&self) -> f64 {
        2.0 * self.op_mac
    }
}

/// Static peak op counts for one template+search forward pass of the given
/// configuration. Every computation in the forward appears as a row; nothing
/// is silently omitted.
pub fn count_ops(cfg: &TrackerConfig) -> Vec<OpRow> {
    let mut rows = Vec::new();
    let n = (cfg.tokens_template() + cfg.tokens_search()) as f64;
    let ns = cfg.tokens_search() as f64;
    let t = cfg.time_steps as f64;
    let p2 = (cfg.patch * cfg.patch) as f64;
    let ma = cfg.ann_dim as f64;
    let ms = cfg.snn_dim as f64;
    let fa = cfg.ann_mlp_hidden as f64;
    let fs = cfg.snn_mlp_hidden as f64;
    let ks = cfg.snn_mlp_kernel as f64;
    let l = cfg.code_dim as f64;
    let h = cfg.heads as f64;
    let mac = |rows: &mut Vec<OpRow>, branch, layer: String, op_mac: f64| {
        rows.push(OpRow { layer, branch, op_mac, op_ac: 0.0, rate_key: None });
    };
    let ac = |rows: &mut Vec<OpRow>, layer: String, op_ac: f64, key: String| {
        rows.push(OpRow {
            layer,
            branch: Branch::Snn,
            op_mac: 0.0,
            op_ac,
            rate_key: Some(key),
        });
    };
    if cfg.has_ann() {
        mac(&mut rows, Branch::Ann, "ann.embed.proj".into(), ma * 3.0 * p2 * n);
        mac(&mut rows, Branch::Ann, "ann.embed.pos".into(), ma * n);
        for k in 0..cfg.ann_depth {
            let b = format!("ann.block{k}");
            mac(&mut rows, Branch::Ann, format!("{b}.msa.qkv"), 3.0 * ma * ma * n);
            mac(&mut rows, Branch::Ann, format!("{b}.msa.qk"), ma * n * n);
            mac(&mut rows, Branch::Ann, format!("{b}.msa.softmax"), h * n * n);
            mac(&mut rows, Branch::Ann, format!("{b}.msa.av"), ma * n * n);
            mac(&mut rows, Branch::Ann, format!("{b}.msa.o"), ma * ma * n);
            mac(&mut rows, Branch::Ann, format!("{b}.mlp"), 2.0 * ma * fa * n);
            // two layer norms, GELU, biases, two residual adds
            let pointwise = 2.0 * ma * n + fa * n + (fa + ma) * n + 2.0 * ma * n;
            mac(&mut rows, Branch::Ann, format!("{b}.pointwise"), pointwise);
        }
    }
    if cfg.has_snn() {
        // event frames are real-valued; the first projection multiplies
        mac(&mut rows, Branch::Snn, "snn.tok.proj".into(), ms * 3.0 * p2 * n * t);
        mac(&mut rows, Branch::Snn, "snn.tok.pointwise".into(), 2.0 * ms * n * t);
        for k in 0..cfg.snn_depth {
            let b = format!("snn.block{k}");
            for tag in ["q", "k", "v"] {
                ac(
                    &mut rows,
                    format!("{b}.msa.{tag}"),
                    ms * ms * n * t,
                    format!("{b}.msa.in_lif"),
                );
            }
            ac(&mut rows, format!("{b}.msa.qk"), ms * n * n * t, format!("{b}.msa.qk"));
            ac(&mut rows, format!("{b}.msa.sv"), ms * n * n * t, format!("{b}.msa.sv"));
            // output conv consumes the real-valued attention map
            mac(&mut rows, Branch::Snn, format!("{b}.msa.o"), ms * ms * n * t);
            // input neuron, three branch norms + neurons, scale, output
            // norm, residual add
            mac(&mut rows, Branch::Snn, format!("{b}.msa.pointwise"), 10.0 * ms * n * t);
            ac(
                &mut rows,
                format!("{b}.mlp.fc1"),
                ms * fs * ks * n * t,
                format!("{b}.mlp.fc1"),
            );
            ac(
                &mut rows,
                format!("{b}.mlp.fc2"),
                fs * ms * ks * n * t,
                format!("{b}.mlp.fc2"),
            );
            // two neurons, two norms, residual add
            let pointwise = (ms + fs) * n * t + (fs + ms) * n * t + ms * n * t;
            mac(&mut rows, Branch::Snn, format!("{b}.mlp.pointwise"), pointwise);
        }
    }
    let fused = cfg.fused_layers();
    if !fused.is_empty() {
        if cfg.directions.e2i() {
            mac(&mut rows, Branch::Adapter, "fuse.p0.e2i".into(), l * ms * n * t);
            if matches!(cfg.chaining, crate::tracker::CodeChaining::PerStage) {
                mac(&mut rows, Branch::Adapter, "fuse.p0.e2i.s2".into(), l * ms * n * t);
            }
        }
        if cfg.directions.i2e() {
            mac(&mut rows, Branch::Adapter, "fuse.p0.i2e".into(), l * ma * n);
            if matches!(cfg.chaining, crate::tracker::CodeChaining::PerStage) {
                mac(&mut rows, Branch::Adapter, "fuse.p0.i2e.s2".into(), l * ma * n);
            }
        }
    }
    for k in fused {
        for stage in ["s1", "s2"] {
            if cfg.directions.e2i() {
                let b = format!("fuse{k}.e2i.{stage}");
                mac(&mut rows, Branch::Adapter, format!("{b}.dict"), ms * l * n * t);
                mac(&mut rows, Branch::Adapter, format!("{b}.analysis"), l * ms * n * t);
                // synthesis runs after the step collapse: T-independent
                mac(&mut rows, Branch::Adapter, format!("{b}.synthesis"), ma * l * n);
                // residual, code update, shrink, skip average, step pooling
                // and gating, mapped-feature add
                let pointwise = ms * n * t
                    + 2.0 * l * n * t
                    + l * n * t
                    + (2.0 * l * n * t + 2.0 * l * t + t + l * n * t)
                    + ma * n;
                mac(&mut rows, Branch::Adapter, format!("{b}.pointwise"), pointwise);
            }
            if cfg.directions.i2e() {
                let b = format!("fuse{k}.i2e.{stage}");
                mac(&mut rows, Branch::Adapter, format!("{b}.dict"), ma * l * n);
                mac(&mut rows, Branch::Adapter, format!("{b}.analysis"), l * ma * n);
                mac(&mut rows, Branch::Adapter, format!("{b}.synthesis"), ms * l * n);
                // residual, code update, shrink, skip average, broadcast add
                // into every step
                let pointwise = ma * n + 2.0 * l * n + l * n + ms * n * t;
                mac(&mut rows, Branch::Adapter, format!("{b}.pointwise"), pointwise);
            }
        }
    }
    let head_in = match cfg.modality {
        crate::tracker::Modality::Hybrid => ma + ms,
        crate::tracker::Modality::RgbOnly => ma,
        crate::tracker::Modality::EventOnly => ms,
    } as f64;
    let hh = cfg.head_hidden as f64;
    mac(&mut rows, Branch::Head, "head.fc1".into(), hh * head_in * ns);
    mac(&mut rows, Branch::Head, "head.fc2".into(), 5.0 * hh * ns);
    // step-mean fusion, GELU, biases
    let fusion = if cfg.has_snn() { ms * n * t } else { 0.0 };
    mac(
        &mut rows,
        Branch::Head,
        "head.pointwise".into(),
        fusion + hh * ns + (hh + 5.0) * ns,
    );
    rows
}

/// Average firing rates over one or more samples, keyed by probe name.
pub fn measure_firing_rates(
    model: &HybridModel,
    samples: &[PairSample],
) -> Result<Vec<(String, f64)>> {
    if samples.is_empty() {
        return Err(CoreError::InvalidArgument("no samples to measure".into()));
    }
    let mut sums: Vec<(String, f64, usize)> = Vec::new();
    for s in samples {
        let mut g = crate::graph::Graph::new();
        let mut probe = Probe::on();
        model.forward_pair(&mut g, s, &mut probe)?;
        for (name, r) in probe.rates() {
            match sums.iter_mut().find(|(n, _, _)| n == name) {
                Some((_, acc, cnt)) => {
                    *acc += r;
                    *cnt += 1;
                }
                None => sums.push((name.clone(), *r, 1)),
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(n, acc, cnt)| (n, acc / cnt as f64))
        .collect())
}

/// One layer of the joined report.
#[derive(Clone, Debug, Serialize)]
pub struct EnergyRow {
    pub layer: String,
    pub branch: Branch,
    pub op_mac: f64,
    pub op_ac: f64,
    pub firing_rate: f64,
    /// op_ac * firing_rate.
    pub syops: f64,
    pub energy_pj: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnergyReport {
    pub rows: Vec<EnergyRow>,
    pub mac_total: f64,
    pub ac_peak_total: f64,
    pub syops_total: f64,
    /// Frame branch, adapters, and head (all real-valued).
    pub e_ann_pj: f64,
    /// Event branch: its MAC share plus spike-driven accumulates.
    pub e_snn_pj: f64,
    pub e_total_pj: f64,
}

impl EnergyReport {
    pub fn e_ann_mj(&self) -> f64 {
        self.e_ann_pj * 1e-9
    }

    pub fn e_snn_mj(&self) -> f64 {
        self.e_snn_pj * 1e-9
    }

    pub fn e_total_mj(&self) -> f64 {
        self.e_total_pj * 1e-9
    }
}

/// Join static counts with measured firing rates and price the result.
pub fn estimate_energy(rows: &[OpRow], rates: &[(String, f64)]) -> Result<EnergyReport> {
    let mut out = Vec::with_capacity(rows.len());
    let mut mac_total = 0.0;
    let mut ac_peak_total = 0.0;
    let mut syops_total = 0.0;
    let mut e_ann = 0.0;
    let mut e_snn = 0.0;
    for row in rows {
        if row.op_mac < 0.0 || row.op_ac < 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "negative op count in {}",
                row.layer
            )));
        }
        let fr = match (&row.rate_key, row.op_ac > 0.0) {
            (Some(key), _) => {
                let r = rates
                    .iter()
                    .find(|(n, _)| n == key)
                    .map(|(_, r)| *r)
                    .ok_or_else(|| {
                        CoreError::Config(format!(
                            "no measured firing rate for {} (key {key})",
                            row.layer
                        ))
                    })?;
                if !(0.0..=1.0 + 1e-9).contains(&r) {
                    return Err(CoreError::Numerical(format!(
                        "firing rate {r} for {key} outside [0, 1]"
                    )));
                }
                r.min(1.0)
            }
            (None, true) => {
                return Err(CoreError::Config(format!(
                    "synaptic layer {} lacks a rate key",
                    row.layer
                )))
            }
            (None, false) => 0.0,
        };
        let syops = row.op_ac * fr;
        let energy_pj = row.op_mac * E_MAC_PJ + syops * E_AC_PJ;
        mac_total += row.op_mac;
        ac_peak_total += row.op_ac;
        syops_total += syops;
        match row.branch {
            Branch::Snn => e_snn += energy_pj,
            _ => e_ann += energy_pj,
        }
        out.push(EnergyRow {
            layer: row.layer.clone(),
            branch: row.branch,
            op_mac: row.op_mac,
            op_ac: row.op_ac,
            firing_rate: fr,
            syops,
            energy_pj,
        });
    }
    Ok(EnergyReport {
        rows: out,
        mac_total,
        ac_peak_total,
        syops_total,
        e_ann_pj: e_ann,
        e_snn_pj: e_snn,
        e_total_pj: e_ann + e_snn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracker::{CodeChaining, FusionDirections, Modality};
    use ndarray::{Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn tiny_cfg() -> TrackerConfig {
        TrackerConfig {
            ann_dim: 8,
            snn_dim: 8,
            code_dim: 4,
            ann_depth: 2,
            snn_depth: 2,
            fusion_layers: 1,
            heads: 2,
            ann_mlp_hidden: 16,
            snn_mlp_hidden: 16,
            head_hidden: 16,
            time_steps: 3,
            patch: 16,
            template_size: 32,
            search_size: 64,
            ..TrackerConfig::toy()
        }
    }

    fn random_sample(rng: &mut ChaCha12Rng, cfg: &TrackerConfig, scale: f64) -> PairSample {
        let t = cfg.time_steps;
        let (ts, ss) = (cfg.template_size, cfg.search_size);
        let img = |rng: &mut ChaCha12Rng, s: usize| {
            Array3::from_shape_fn((3, s, s), |_| rng.gen_range(0.0..1.0))
        };
        let ev = |rng: &mut ChaCha12Rng, s: usize| {
            Array4::from_shape_fn((t, 3, s, s), |_| rng.gen_range(0.0..2.0f64).floor() * scale)
        };
        PairSample {
            tpl_img: img(rng, ts),
            srch_img: img(rng, ss),
            tpl_events: ev(rng, ts),
            srch_events: ev(rng, ss),
            gt: crate::eventsim::BoundingBox::new(30.0, 28.0, 14.0, 10.0).unwrap(),
        }
    }

    #[test]
    fn published_cost_arithmetic() {
        // dense dual-transformer baseline: 56.4G MACs, no spikes
        let e = energy_mj(56.4e9, 0.0);
        assert!((e - 259.44).abs() < 1e-9);
        assert!((e - 259.3).abs() / 259.3 < 1e-3);
        // spiking branch: 4.2G synaptic ops
        let e_ac = energy_mj(0.0, 4.2e9);
        assert!((e_ac - 3.78).abs() < 1e-12);
        // single-step variant: 3.7G FLOPs = 1.85G MACs alongside the syops
        let e_t1 = energy_mj(3.7e9 / 2.0, 4.2e9);
        assert!((e_t1 - 12.2).abs() / 12.2 < 0.01);
    }

    #[test]
    fn zero_ops_cost_nothing() {
        assert_eq!(energy_mj(0.0, 0.0), 0.0);
        let report = estimate_energy(&[], &[]).unwrap();
        assert_eq!(report.e_total_pj, 0.0);
        assert!(report.rows.is_empty());
    }

    #[test]
    fn counted_rates_all_measurable_on_real_forward() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let cfg = tiny_cfg();
        let model = HybridModel::new(cfg, 3).unwrap();
        let samples = vec![
            random_sample(&mut rng, &cfg, 1.0),
            random_sample(&mut rng, &cfg, 1.0),
        ];
        let rates = measure_firing_rates(&model, &samples).unwrap();
        let rows = count_ops(&cfg);
        let report = estimate_energy(&rows, &rates).unwrap();
        assert!(report.e_total_pj > 0.0);
        assert!(report.mac_total > 0.0);
        assert!(report.ac_peak_total > 0.0);
        for row in &report.rows {
            assert!(row.firing_rate >= 0.0 && row.firing_rate <= 1.0, "{}", row.layer);
            assert!(row.syops <= row.op_ac + 1e-9);
        }
        // branch split covers everything
        assert!((report.e_ann_pj + report.e_snn_pj - report.e_total_pj).abs() < 1e-6);
    }

    #[test]
    fn silent_inputs_draw_no_dynamic_power() {
        let cfg = tiny_cfg();
        let model = HybridModel::new(cfg, 5).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut s = random_sample(&mut rng, &cfg, 0.0);
        s.tpl_events.fill(0.0);
        s.srch_events.fill(0.0);
        let rates = measure_firing_rates(&model, &[s]).unwrap();
        let rows = count_ops(&cfg);
        let report = estimate_energy(&rows, &rates).unwrap();
        assert_eq!(report.syops_total, 0.0);
        // the event branch still pays its real-valued projections
        assert!(report.e_snn_pj > 0.0);
    }

    #[test]
    fn accumulate_count_scales_with_steps_but_mapped_synthesis_does_not() {
        let base = tiny_cfg();
        let one = TrackerConfig { time_steps: 1, ..base };
        let three = TrackerConfig { time_steps: 3, ..base };
        let r1 = count_ops(&one);
        let r3 = count_ops(&three);
        let ac = |rows: &[OpRow]| rows.iter().map(|r| r.op_ac).sum::<f64>();
        assert!((ac(&r3) - 3.0 * ac(&r1)).abs() < 1e-9);
        let syn = |rows: &[OpRow]| {
            rows.iter()
                .find(|r| r.layer == "fuse0.e2i.s1.synthesis")
                .unwrap()
                .op_mac
        };
        assert_eq!(syn(&r1), syn(&r3));
    }

    #[test]
    fn flops_are_twice_macs() {
        for row in count_ops(&tiny_cfg()) {
            assert_eq!(row.flops(), 2.0 * row.op_mac);
        }
    }

    #[test]
    fn estimate_is_additive_over_row_concatenation() {
        let cfg = tiny_cfg();
        let rows = count_ops(&cfg);
        let rates: Vec<(String, f64)> = rows
            .iter()
            .filter_map(|r| r.rate_key.clone())
            .map(|k| (k, 0.25))
            .collect();
        let half = estimate_energy(&rows, &rates).unwrap();
        let mut doubled = rows.clone();
        doubled.extend(rows.iter().cloned());
        let full = estimate_energy(&doubled, &rates).unwrap();
        assert!((full.e_total_pj - 2.0 * half.e_total_pj).abs() < 1e-6);
        assert!((full.syops_total - 2.0 * half.syops_total).abs() < 1e-9);
    }

    #[test]
    fn bad_rates_are_rejected() {
        let rows = vec![OpRow {
            layer: "x".into(),
            branch: Branch::Snn,
            op_mac: 0.0,
            op_ac: 10.0,
            rate_key: Some("x.in".into()),
        }];
        assert!(matches!(
            estimate_energy(&rows, &[("x.in".into(), 1.5)]),
            Err(CoreError::Numerical(_))
        ));
        assert!(matches!(
            estimate_energy(&rows, &[]),
            Err(CoreError::Config(_))
        ));
        // exact bounds are fine
        for r in [0.0, 1.0] {
            let rep = estimate_energy(&rows, &[("x.in".into(), r)]).unwrap();
            assert!((rep.syops_total - 10.0 * r).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_cover_every_forward_stage() {
        let cfg = TrackerConfig { chaining: CodeChaining::PerStage, ..tiny_cfg() };
        let rows = count_ops(&cfg);
        let names: Vec<&str> = rows.iter().map(|r| r.layer.as_str()).collect();
        for expect in [
            "ann.embed.proj",
            "ann.block0.msa.qkv",
            "ann.block0.msa.softmax",
            "ann.block0.pointwise",
            "snn.tok.proj",
            "snn.block0.msa.q",
            "snn.block0.msa.qk",
            "snn.block0.msa.sv",
            "snn.block0.msa.o",
            "snn.block0.mlp.fc1",
            "fuse.p0.e2i",
            "fuse.p0.e2i.s2",
            "fuse0.e2i.s1.dict",
            "fuse0.e2i.s1.synthesis",
            "fuse0.i2e.s2.analysis",
            "head.fc1",
            "head.pointwise",
        ] {
            assert!(names.contains(&expect), "missing row {expect}");
        }
        // single-modality configs drop the other branch entirely
        let rgb = count_ops(&TrackerConfig {
            modality: Modality::RgbOnly,
            directions: FusionDirections::None,
            ..tiny_cfg()
        });
        assert!(rgb.iter().all(|r| !r.layer.starts_with("snn.")));
        assert!(rgb.iter().all(|r| !r.layer.starts_with("fuse")));
    }
}
