//! End-to-end checks of the binary: each subcommand runs against a small
//! benchmark in a temp dir, and identical seeds reproduce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use evtrack::config::RunConfig;
use evtrack_core::tracker::TrackerConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_evtrack"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_benchmark(dir: &Path) {
    run_ok(bin().args([
        "build-benchmark",
        "--out",
        dir.to_str().unwrap(),
        "--train-per-split",
        "2",
        "--test-per-split",
        "1",
        "--frames",
        "4",
    ]));
}

fn tiny_config(path: &Path) {
    let mut run = RunConfig::toy();
    run.model = TrackerConfig {
        ann_dim: 16,
        snn_dim: 16,
        code_dim: 4,
        ann_depth: 2,
        snn_depth: 2,
        fusion_layers: 1,
        heads: 2,
        ann_mlp_hidden: 32,
        snn_mlp_hidden: 32,
        head_hidden: 32,
        time_steps: 2,
        template_size: 32,
        search_size: 64,
        ..TrackerConfig::toy()
    };
    run.train.epochs = 1;
    run.train.batch_size = 4;
    run.train.pairs_per_epoch = 8;
    run.validate().unwrap();
    fs::write(path, toml::to_string(&run).unwrap()).unwrap();
}

struct Fixture {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    cfg: PathBuf,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("bench");
    tiny_benchmark(&data);
    let cfg = tmp.path().join("run.toml");
    tiny_config(&cfg);
    let root = tmp.path().to_path_buf();
    Fixture { _tmp: tmp, data, cfg, root }
}

#[test]
fn benchmark_layout_and_init_config() {
    let f = fixture();
    assert!(f.data.join("manifest.json").is_file());
    for split in ["easy", "low_light", "overexposed", "fast_motion", "distractor"] {
        let seq = f.data.join(split).join("seq_000");
        assert!(seq.join("frames/00000.png").is_file(), "{split}");
        assert!(seq.join("events.csv").is_file());
        assert!(seq.join("gt.csv").is_file());
        assert!(seq.join("seq.json").is_file());
    }
    let cfg_path = f.root.join("generated.toml");
    run_ok(bin().args(["init-config", "--preset", "toy", "--out", cfg_path.to_str().unwrap()]));
    let text = fs::read_to_string(&cfg_path).unwrap();
    let parsed: RunConfig = toml::from_str(&text).unwrap();
    parsed.validate().unwrap();
}

#[test]
fn train_track_eval_energy_chain() {
    let f = fixture();
    let out = f.root.join("run");
    let stdout = run_ok(bin().args([
        "train",
        "--config",
        f.cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
    ]));
    assert!(stdout.contains("checkpoint"), "{stdout}");
    let ckpt = out.join("checkpoint.json");
    assert!(ckpt.is_file());
    assert!(out.join("loss.csv").is_file());
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,step,loss,focal,l1,giou,lr"));
    assert!(loss.lines().count() >= 2);

    let seq = f.data.join("easy/seq_002");
    let pred = f.root.join("pred.csv");
    run_ok(bin().args([
        "track",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--seq",
        seq.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
    ]));
    let pred_text = fs::read_to_string(&pred).unwrap();
    assert!(pred_text.starts_with("frame,cx,cy,w,h"));
    assert_eq!(pred_text.lines().count(), 5, "header plus one row per frame");

    let report = f.root.join("eval.json");
    let stdout = run_ok(bin().args([
        "eval",
        "--pred",
        pred.to_str().unwrap(),
        "--gt",
        seq.join("gt.csv").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]));
    assert!(stdout.contains("SR_AUC"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["sr_auc"].as_f64().unwrap() >= 0.0);
    assert_eq!(json["sr_curve"].as_array().unwrap().len(), 21);
    assert_eq!(json["pr_curve"].as_array().unwrap().len(), 51);

    let energy = f.root.join("energy.csv");
    let stdout = run_ok(bin().args([
        "energy",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--out",
        energy.to_str().unwrap(),
        "--samples",
        "1",
    ]));
    for key in ["Params", "MAC", "FLOPs", "SyOps", "E_ANN", "E_SNN"] {
        assert!(stdout.contains(key), "missing {key} in summary:\n{stdout}");
    }
    let csv = fs::read_to_string(&energy).unwrap();
    assert!(csv.starts_with("layer,branch,op_mac,op_ac,firing_rate,syops,energy_mj"));
    assert!(csv.lines().last().unwrap().starts_with("total,"));
}

#[test]
fn energy_runs_without_a_benchmark() {
    let f = fixture();
    let out = f.root.join("run");
    run_ok(bin().args([
        "train",
        "--config",
        f.cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
    ]));
    let energy = f.root.join("energy_builtin.csv");
    run_ok(bin().args([
        "energy",
        "--ckpt",
        out.join("checkpoint.json").to_str().unwrap(),
        "--out",
        energy.to_str().unwrap(),
    ]));
    assert!(energy.is_file());
}

#[test]
fn identical_seeds_reproduce_identical_artifacts() {
    let f = fixture();
    let (a, b) = (f.root.join("a"), f.root.join("b"));
    for out in [&a, &b] {
        run_ok(bin().args([
            "train",
            "--config",
            f.cfg.to_str().unwrap(),
            "--seed",
            "99",
            "--out",
            out.to_str().unwrap(),
            "--data",
            f.data.to_str().unwrap(),
        ]));
    }
    let read = |p: &Path| fs::read(p).unwrap();
    assert_eq!(read(&a.join("loss.csv")), read(&b.join("loss.csv")));
    assert_eq!(read(&a.join("checkpoint.json")), read(&b.join("checkpoint.json")));
}

#[test]
fn verify_ista_emits_converged_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("vista.csv");
    let stdout = run_ok(bin().args([
        "verify-ista",
        "--instances",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert!(stdout.contains("worst KKT residual"));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "seed,objective_final,kkt_residual,adapter_vs_oracle_maxdiff"
    );
    let mut rows = 0;
    for line in lines {
        let cols: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(cols.len(), 4);
        assert!(cols[2] < 1e-4, "kkt {}", cols[2]);
        assert!(cols[3] < 1e-10, "tie gap {}", cols[3]);
        rows += 1;
    }
    assert_eq!(rows, 5);
}

#[test]
fn warm_start_uses_matching_parameters() {
    let f = fixture();
    let base = f.root.join("base");
    run_ok(bin().args([
        "train",
        "--config",
        f.cfg.to_str().unwrap(),
        "--out",
        base.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
    ]));
    let warm = f.root.join("warm");
    run_ok(bin().args([
        "train",
        "--config",
        f.cfg.to_str().unwrap(),
        "--out",
        warm.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--warm-start",
        base.join("checkpoint.json").to_str().unwrap(),
    ]));
    assert!(warm.join("checkpoint.json").is_file());
}
