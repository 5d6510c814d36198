//! Release gate. Each test is one acceptance criterion, checked at its
//! stated tolerance; together they pin the published cost arithmetic, the
//! sparse-solver oracles, gradient correctness, exact spike binarity, the
//! metric definitions, and the end-to-end training targets.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use evtrack::config::RunConfig;
use evtrack::dataset::{self, BenchmarkSpec, SplitKind};
use evtrack::runner::{track_and_eval_splits, verify_ista_cmd};
use evtrack::{ablate, checkpoint, train};
use evtrack_core::energy::{energy_mj, estimate_energy, OpRow, Probe, E_AC_PJ, E_MAC_PJ};
use evtrack_core::eventsim::BoundingBox;
use evtrack_core::graph::{Graph, SpikeMode, Var};
use evtrack_core::ista::{
    ista_adapter_forward, ista_reference_solve, new_adapter, new_tda, run_tied_chain,
    soft_threshold, tda_forward, AdapterInit, default_step,
};
use evtrack_core::metrics::compute_metrics;
use evtrack_core::params::ParamStore;
use evtrack_core::tracker::{
    FusionDirections, HybridModel, Modality, PairSample, TrackerConfig,
};
use evtrack_core::vit::{new_vit_block, vit_block_forward};
use ndarray::{Array2, Array3, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

// ---- shared fixtures ----

fn bench_root() -> &'static Path {
    static BENCH: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    let (_, path) = BENCH.get_or_init(|| {
        let tmp = tempfile::tempdir().expect("tempdir");
        let root = tmp.path().join("bench");
        dataset::build_benchmark(&root, &BenchmarkSpec::default()).expect("benchmark");
        (tmp, root)
    });
    path
}

fn randn(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

fn small_cfg() -> TrackerConfig {
    TrackerConfig {
        ann_dim: 16,
        snn_dim: 16,
        code_dim: 6,
        ann_depth: 2,
        snn_depth: 2,
        fusion_layers: 2,
        heads: 2,
        ann_mlp_hidden: 24,
        snn_mlp_hidden: 24,
        head_hidden: 24,
        time_steps: 2,
        template_size: 32,
        search_size: 64,
        ..TrackerConfig::toy()
    }
}

fn random_pair(rng: &mut ChaCha12Rng, cfg: &TrackerConfig) -> PairSample {
    let (ts, ss, t) = (cfg.template_size, cfg.search_size, cfg.time_steps);
    PairSample {
        tpl_img: Array3::from_shape_fn((3, ts, ts), |_| rng.gen_range(0.0..1.0)),
        srch_img: Array3::from_shape_fn((3, ss, ss), |_| rng.gen_range(0.0..1.0)),
        tpl_events: Array4::from_shape_fn((t, 3, ts, ts), |_| rng.gen_range(0.0..0.6)),
        srch_events: Array4::from_shape_fn((t, 3, ss, ss), |_| rng.gen_range(0.0..0.6)),
        gt: BoundingBox::new(ss as f64 / 2.0, ss as f64 / 2.0, 14.0, 12.0).unwrap(),
    }
}

// ---- criterion 1: published energy arithmetic, < 1 s ----

#[test]
fn criterion_1_published_energy_arithmetic() {
    // dense dual-transformer reference: 56.4G MACs at 4.6 pJ
    let dense = energy_mj(56.4e9, 0.0);
    assert!((dense - 259.44).abs() < 1e-9, "56.4G MACs -> {dense} mJ");
    assert!(
        (dense - 259.3).abs() / 259.3 < 1e-3,
        "{dense} mJ not within 0.1% of the published 259.3 mJ"
    );
    // the cost model is exactly E = 4.6 pJ * MAC + 0.9 pJ * SyOps
    assert_eq!(E_MAC_PJ, 4.6);
    assert_eq!(E_AC_PJ, 0.9);
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    for _ in 0..100 {
        let macs = rng.gen_range(0.0..1e10);
        let syops = rng.gen_range(0.0..1e10);
        let want = (macs * 4.6 + syops * 0.9) * 1e-9;
        assert_eq!(energy_mj(macs, syops), want);
    }
    // a report built from rows reproduces the same arithmetic
    let rows = vec![
        OpRow { layer: "a".into(), branch: evtrack_core::energy::Branch::Ann, op_mac: 1e9, op_ac: 0.0, rate_key: None },
        OpRow { layer: "b".into(), branch: evtrack_core::energy::Branch::Snn, op_mac: 0.0, op_ac: 2e9, rate_key: Some("r".into()) },
    ];
    let rep = estimate_energy(&rows, &[("r".into(), 0.25)]).unwrap();
    assert!((rep.e_total_mj() - energy_mj(1e9, 0.5e9)).abs() < 1e-12);
    println!("criterion 1 PASS: 56.4G MAC -> {dense:.2} mJ (published 259.3)");
}

// ---- criterion 2: solver oracle on 100 random instances, < 30 s ----

#[test]
fn criterion_2_sparse_solver_oracle() {
    // objective descent is enforced inside the solver; an increase errors out
    let rows = verify_ista_cmd(2000, 100, 5000).unwrap();
    assert_eq!(rows.len(), 100);
    let worst = rows.iter().fold(0.0f64, |a, r| a.max(r.kkt_residual));
    assert!(worst < 1e-4, "worst KKT residual {worst}");

    // scalar closed form: argmin (x - d a)^2 + lambda |a| = soft(d x, lambda/2) / d^2
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    for _ in 0..50 {
        let d = rng.gen_range(0.5..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let x = rng.gen_range(-2.0..2.0);
        let lambda = rng.gen_range(0.0..1.5);
        let dm = Array2::from_elem((1, 1), d);
        let xm = Array2::from_elem((1, 1), x);
        let step = default_step(&dm);
        let got = ista_reference_solve(&xm, &dm, lambda, step, 4000).unwrap().code[[0, 0]];
        let s = soft_threshold(
            &ArrayD::from_elem(ndarray::IxDyn(&[1]), d * x),
            lambda / 2.0,
        )
        .unwrap()[[0]];
        let want = s / (d * d);
        assert!(
            (got - want).abs() < 1e-6,
            "d={d} x={x} lambda={lambda}: solver {got} vs closed form {want}"
        );
    }
    println!("criterion 2 PASS: 100 instances, worst KKT {worst:.2e}; scalar closed forms within 1e-6");
}

// ---- criterion 3: tied adapters equal solver iterations, < 5 s ----

#[test]
fn criterion_3_tied_adapters_equal_solver_iterations() {
    let mut rng = ChaCha12Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for k in [1usize, 3, 8] {
        for _ in 0..5 {
            let (m, l, n) = (6, 12, 3);
            let d = Array2::from_shape_fn((m, l), |_| rng.gen_range(-1.0..1.0));
            let x = Array2::from_shape_fn((m, n), |_| rng.gen_range(-1.0..1.0));
            let step = default_step(&d);
            let lambda = 0.3;
            let chained = run_tied_chain(&d, lambda, step, &x, k).unwrap();
            let oracle = ista_reference_solve(&x, &d, lambda, step, k).unwrap().code;
            let diff = (&chained - &oracle)
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(diff < 1e-10, "K={k}: max |chain - solver| = {diff}");
            worst = worst.max(diff);
        }
    }
    println!("criterion 3 PASS: worst gap over K in {{1,3,8}} x 5 instances: {worst:.2e}");
}

// ---- criterion 4: gradient checks, < 2 min ----

/// Central-difference check of d(sum of weighted out)/d(param) for every
/// parameter bound on the tape.
fn fd_check_params(
    store: &ParamStore,
    eval: &dyn Fn(&ParamStore, &mut Probe) -> (Graph, Var),
    tol: f64,
    label: &str,
) -> usize {
    let scalar = |s: &ParamStore| -> f64 {
        let (g, root) = eval(s, &mut Probe::off());
        g.value(root)[[]]
    };
    let (g, root) = eval(store, &mut Probe::off());
    let grads = g.backward(root);
    let mut checked = 0usize;
    for (id, var) in g.bound_params().to_vec() {
        let analytic = grads
            .of(var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(store.value(id).raw_dim()));
        for i in 0..store.value(id).len() {
            let base = store.value(id).as_slice().unwrap()[i];
            let h = 1e-6 * (1.0 + base.abs());
            let mut sp = store.clone();
            sp.value_mut(id).as_slice_mut().unwrap()[i] += h;
            let fp = scalar(&sp);
            let mut sm = store.clone();
            sm.value_mut(id).as_slice_mut().unwrap()[i] -= h;
            let fm = scalar(&sm);
            let num = (fp - fm) / (2.0 * h);
            let ana = analytic.as_slice().unwrap()[i];
            let rel = (num - ana).abs() / (1.0 + num.abs().max(ana.abs()));
            assert!(
                rel < tol,
                "{label}: param {} entry {i}: fd {num} vs analytic {ana} (rel {rel})",
                store.entry(id).name
            );
            checked += 1;
        }
    }
    checked
}

#[test]
fn criterion_4_gradient_checks() {
    let mut rng = ChaCha12Rng::seed_from_u64(23);
    let mut total = 0usize;

    // adapter with skip and temporal collapse; inputs scaled away from kinks
    let mut store = ParamStore::new();
    let ap = new_adapter(
        &mut store,
        &AdapterInit { name: "a", m_src: 5, m_dst: 4, code_dim: 3, tda_pool_len: Some(3) },
        &mut rng,
    );
    let x3 = randn(&mut rng, &[2, 5, 4]);
    let a0 = randn(&mut rng, &[3, 4]).mapv(|v| 0.5 * v);
    let w = randn(&mut rng, &[4, 4]);
    let ap_c = ap.clone();
    total += fd_check_params(
        &store,
        &move |s, probe| {
            let mut g = Graph::new();
            let x = g.constant(x3.clone());
            let a = g.constant(a0.clone());
            let out = ista_adapter_forward(&mut g, s, &ap_c, x, a, true, true).unwrap();
            let _ = probe;
            let wv = g.constant(w.clone());
            let p = g.mul(out.mapped, wv);
            let root = g.sum_all(p);
            (g, root)
        },
        1e-4,
        "adapter",
    );

    // temporal attention alone
    let mut store = ParamStore::new();
    let tda = new_tda(&mut store, "t", 4, &mut rng);
    let a3 = randn(&mut rng, &[3, 4, 5]);
    let w = randn(&mut rng, &[4, 5]);
    total += fd_check_params(
        &store,
        &move |s, _| {
            let mut g = Graph::new();
            let a = g.constant(a3.clone());
            let out = tda_forward(&mut g, s, &tda, a).unwrap();
            let wv = g.constant(w.clone());
            let p = g.mul(out, wv);
            let root = g.sum_all(p);
            (g, root)
        },
        1e-4,
        "temporal attention",
    );

    // transformer block (attention + mlp with layer norms)
    let mut store = ParamStore::new();
    let blk = new_vit_block(&mut store, "b", 8, 2, 16, &mut rng);
    let x = randn(&mut rng, &[8, 6]);
    let w = randn(&mut rng, &[8, 6]);
    total += fd_check_params(
        &store,
        &move |s, _| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let out = vit_block_forward(&mut g, s, &blk, xv);
            let wv = g.constant(w.clone());
            let p = g.mul(out, wv);
            let root = g.sum_all(p);
            (g, root)
        },
        1e-4,
        "vit block",
    );

    // LIF with the smooth firing ramp whose derivative is the surrogate
    let mut store = ParamStore::new();
    let wid = store.add(
        "lif.w",
        evtrack_core::params::ParamGroup::SnnBackbone,
        randn(&mut rng, &[4, 4]),
    );
    let x = randn(&mut rng, &[3, 4, 5]);
    let w2 = randn(&mut rng, &[4, 5]);
    let _ = wid;
    total += fd_check_params(
        &store,
        &move |s, _| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.param(s, s.find("lif.w").unwrap());
            let pre = g.linear(wv, xv);
            let spikes = g.lif(pre, 0.5, 1.0, SpikeMode::Relaxed);
            let w2v = g.constant(w2.clone());
            let p = g.mul(spikes, w2v);
            let root = g.sum_all(p);
            (g, root)
        },
        1e-4,
        "lif surrogate",
    );

    println!("criterion 4 PASS: {total} parameter entries matched central differences at 1e-4");
}

// ---- criterion 5: zeroed adapters bit-equal adapter-free model, < 10 s ----

#[test]
fn criterion_5_zeroed_adapters_bit_equal_adapter_free() {
    let cfg = small_cfg();
    let seed = 77;
    let mut zeroed = HybridModel::new(cfg, seed).unwrap();
    zeroed.silence_fusion();
    let plain = HybridModel::new(
        TrackerConfig { directions: FusionDirections::None, ..cfg },
        seed,
    )
    .unwrap();

    let tensors = |model: &HybridModel, sample: &PairSample| -> Vec<ArrayD<f64>> {
        let mut g = Graph::new();
        let mut probe = Probe::on();
        model.forward_pair(&mut g, sample, &mut probe).unwrap();
        ["ann.final", "snn.final", "head.in"]
            .iter()
            .map(|n| g.value(probe.find_tensor(n).unwrap()).clone())
            .collect()
    };

    let mut rng = ChaCha12Rng::seed_from_u64(3);
    for trial in 0..10 {
        let sample = random_pair(&mut rng, &cfg);
        let a = tensors(&zeroed, &sample);
        let b = tensors(&plain, &sample);
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta.shape(), tb.shape());
            for (va, vb) in ta.iter().zip(tb.iter()) {
                assert_eq!(va.to_bits(), vb.to_bits(), "trial {trial}: bit mismatch");
            }
        }
    }
    println!("criterion 5 PASS: 10 random inputs bit-identical with fusion silenced");
}

// ---- criterion 6: spike binarity fuzz, < 1 min ----

#[test]
fn criterion_6_spikes_are_binary() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let mut values = 0usize;
    for _ in 0..1000 {
        let t = rng.gen_range(1..5);
        let m = rng.gen_range(1..6);
        let n = rng.gen_range(1..8);
        let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
        let tau = rng.gen_range(0.0..1.0);
        let v_th = rng.gen_range(0.2..2.0);
        let x = randn(&mut rng, &[t, m, n]).mapv(|v| v * scale);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let s = g.lif(xv, tau, v_th, SpikeMode::Hard);
        for &v in g.value(s).iter() {
            assert!(v == 0.0 || v == 1.0, "non-binary spike {v}");
            values += 1;
        }
    }
    // and through the full event branch of a real model
    let cfg = TrackerConfig { modality: Modality::EventOnly, ..small_cfg() };
    let model = HybridModel::new(cfg, 5).unwrap();
    let mut g = Graph::new();
    let mut probe = Probe::on();
    let sample = random_pair(&mut rng, &cfg);
    model.forward_pair(&mut g, &sample, &mut probe).unwrap();
    assert!(!probe.rates().is_empty());
    for (name, r) in probe.rates() {
        assert!((0.0..=1.0).contains(r), "{name} rate {r}");
    }
    println!("criterion 6 PASS: {values} spike values over 1000 fuzz samples all in {{0,1}}");
}

// ---- criterion 7: metric oracle, < 10 s ----

fn brute_force_metrics(preds: &[BoundingBox], gts: &[BoundingBox]) -> (Vec<f64>, Vec<f64>, f64) {
    // independent re-implementation: corner-form IoU, curves by counting
    let mut sr = vec![0.0f64; 21];
    let mut pr = vec![0.0f64; 51];
    let mut ious = Vec::new();
    for (p, t) in preds.iter().zip(gts) {
        let (ax0, ay0) = (p.cx - p.w / 2.0, p.cy - p.h / 2.0);
        let (ax1, ay1) = (p.cx + p.w / 2.0, p.cy + p.h / 2.0);
        let (bx0, by0) = (t.cx - t.w / 2.0, t.cy - t.h / 2.0);
        let (bx1, by1) = (t.cx + t.w / 2.0, t.cy + t.h / 2.0);
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let uni = p.w * p.h + t.w * t.h - inter;
        ious.push(if uni > 0.0 { inter / uni } else { 0.0 });
    }
    let n = preds.len() as f64;
    for (k, s) in sr.iter_mut().enumerate() {
        let th = k as f64 / 20.0;
        *s = preds
            .iter()
            .zip(gts)
            .zip(&ious)
            .filter(|(_, &i)| if th == 0.0 { i > 0.0 } else { i >= th })
            .count() as f64
            / n;
    }
    for (k, s) in pr.iter_mut().enumerate() {
        *s = preds
            .iter()
            .zip(gts)
            .filter(|(p, t)| {
                ((p.cx - t.cx).powi(2) + (p.cy - t.cy).powi(2)).sqrt() < k as f64
            })
            .count() as f64
            / n;
    }
    let auc = sr.iter().sum::<f64>() / sr.len() as f64;
    (sr, pr, auc)
}

#[test]
fn criterion_7_metric_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(29);
    for fixture in 0..100 {
        let n = rng.gen_range(1..40);
        let mk = |rng: &mut ChaCha12Rng| {
            BoundingBox::new(
                rng.gen_range(0.0..100.0),
                rng.gen_range(0.0..100.0),
                rng.gen_range(1.0..40.0),
                rng.gen_range(1.0..40.0),
            )
            .unwrap()
        };
        let preds: Vec<_> = (0..n).map(|_| mk(&mut rng)).collect();
        let gts: Vec<_> = (0..n).map(|_| mk(&mut rng)).collect();
        let got = compute_metrics(&preds, &gts, None).unwrap();
        let (sr, pr, auc) = brute_force_metrics(&preds, &gts);
        for (a, b) in got.sr_curve.iter().zip(&sr) {
            assert!((a - b).abs() < 1e-12, "fixture {fixture}: success curve");
        }
        for (a, b) in got.pr_curve.iter().zip(&pr) {
            assert!((a - b).abs() < 1e-12, "fixture {fixture}: precision curve");
        }
        assert!((got.sr_auc - auc).abs() < 1e-12);
    }

    // hand fixture: same-center boxes with overlaps 0.81, 0.6, 0.3
    let gt = BoundingBox::new(50.0, 50.0, 10.0, 10.0).unwrap();
    let preds = vec![
        BoundingBox::new(50.0, 50.0, 9.0, 9.0).unwrap(),
        BoundingBox::new(50.0, 50.0, 10.0, 6.0).unwrap(),
        BoundingBox::new(50.0, 50.0, 10.0, 3.0).unwrap(),
    ];
    let res = compute_metrics(&preds, &[gt, gt, gt], None).unwrap();
    assert_eq!(res.op50, 2.0 / 3.0);
    assert_eq!(res.op75, 1.0 / 3.0);
    println!("criterion 7 PASS: 100 fixtures match brute force; OP50 = 2/3, OP75 = 1/3 exactly");
}

// ---- criterion 8: end-to-end training smoke, <= 45 min ----

#[test]
fn criterion_8_training_smoke() {
    let data = bench_root();
    let out = tempfile::tempdir().unwrap();
    let run = RunConfig::toy();
    assert_eq!(run.model.ann_dim, 64);
    assert_eq!(run.model.fusion_layers, 2);
    assert_eq!(run.model.time_steps, 3);
    assert_eq!(run.train.epochs, 20);

    let hybrid_out = train::train(&run, data, &out.path().join("hybrid"), None, &mut |m| {
        println!("[hybrid] {m}")
    })
    .unwrap();
    assert!(
        hybrid_out.last_epoch_loss < hybrid_out.first_epoch_loss,
        "training did not reduce the loss"
    );
    let (hybrid, _) = checkpoint::load(&hybrid_out.checkpoint).unwrap();

    let easy = track_and_eval_splits(&hybrid, data, &[SplitKind::Easy], None).unwrap();
    println!("hybrid easy-split SR_AUC {:.4}", easy.sr_auc);
    assert!(
        easy.sr_auc >= 0.5,
        "hybrid SR_AUC {:.4} below 0.5 on the held-out easy split",
        easy.sr_auc
    );

    let mut rgb_run = run.clone();
    rgb_run.model.modality = Modality::RgbOnly;
    let rgb_out = train::train(&rgb_run, data, &out.path().join("rgb"), None, &mut |m| {
        println!("[rgb] {m}")
    })
    .unwrap();
    let (rgb, _) = checkpoint::load(&rgb_out.checkpoint).unwrap();

    let h_low = track_and_eval_splits(&hybrid, data, &[SplitKind::LowLight], None).unwrap();
    let r_low = track_and_eval_splits(&rgb, data, &[SplitKind::LowLight], None).unwrap();
    println!(
        "low-light SR_AUC: hybrid {:.4} vs frame-only {:.4}",
        h_low.sr_auc, r_low.sr_auc
    );
    assert!(
        h_low.sr_auc > r_low.sr_auc,
        "hybrid ({:.4}) must beat frame-only ({:.4}) on the low-light split",
        h_low.sr_auc,
        r_low.sr_auc
    );
    println!(
        "criterion 8 PASS: easy SR_AUC {:.4} >= 0.5; low-light hybrid {:.4} > frame-only {:.4}",
        easy.sr_auc, h_low.sr_auc, r_low.sr_auc
    );
}

// ---- criterion 9: ablation sweep completes and emits the table ----

#[test]
fn criterion_9_ablation_sweep() {
    let data = bench_root();
    let out = tempfile::tempdir().unwrap();
    let mut run = RunConfig::toy();
    // short shared recipe: the sweep asserts completion, not accuracy
    run.train.epochs = 2;
    run.train.pairs_per_epoch = 48;
    let outcome = ablate::ablate(&run, data, out.path(), &mut |m| println!("[ablate] {m}")).unwrap();

    assert!(outcome.table_csv.is_file());
    assert!(outcome.table_txt.is_file());
    let axes: std::collections::HashSet<&str> =
        outcome.rows.iter().map(|r| r.axis.as_str()).collect();
    assert_eq!(axes.len(), 4, "four swept axes");
    let ks: std::collections::HashSet<usize> = outcome
        .rows
        .iter()
        .filter(|r| r.axis == "adapters")
        .map(|r| r.fusion_layers)
        .collect();
    assert_eq!(ks, [0usize, 2, 4].into_iter().collect());
    let ts: std::collections::HashSet<usize> = outcome
        .rows
        .iter()
        .filter(|r| r.axis == "time_steps")
        .map(|r| r.time_steps)
        .collect();
    assert_eq!(ts, [1usize, 3].into_iter().collect());
    let dirs: std::collections::HashSet<&str> = outcome
        .rows
        .iter()
        .filter(|r| r.axis == "direction")
        .map(|r| r.variant.as_str())
        .collect();
    assert_eq!(dirs.len(), 4);
    let places: std::collections::HashSet<&str> = outcome
        .rows
        .iter()
        .filter(|r| r.axis == "placement")
        .map(|r| r.variant.as_str())
        .collect();
    assert_eq!(places.len(), 2);
    for r in &outcome.rows {
        assert!(r.sr_auc.is_finite() && (0.0..=1.0).contains(&r.sr_auc));
        assert!(r.e_total_mj.is_finite() && r.e_total_mj > 0.0);
    }
    println!(
        "criterion 9 PASS: {} table rows across 4 axes; table at {}",
        outcome.rows.len(),
        outcome.table_csv.display()
    );
}
