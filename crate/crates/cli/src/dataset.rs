//! Synthetic benchmark assembly: renders moving-shape scenes under several
//! difficulty regimes, simulates the event stream, and writes sequence
//! directories (PNG frames, event CSV, ground-truth CSV, metadata) plus a
//! top-level manifest. Also loads those directories back into memory.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use evtrack_core::eventsim::{
    render_scene, simulate_events_with, BoundingBox, Event, EventSimConfig, EventStream,
    Illumination, MovingShape, SceneSpec, ShapeKind,
};
use evtrack_core::tracker::Sequence;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Easy,
    LowLight,
    Overexposed,
    FastMotion,
    Distractor,
}

impl SplitKind {
    pub const ALL: [SplitKind; 5] = [
        SplitKind::Easy,
        SplitKind::LowLight,
        SplitKind::Overexposed,
        SplitKind::FastMotion,
        SplitKind::Distractor,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitKind::Easy => "easy",
            SplitKind::LowLight => "low_light",
            SplitKind::Overexposed => "overexposed",
            SplitKind::FastMotion => "fast_motion",
            SplitKind::Distractor => "distractor",
        }
    }

    pub fn parse(s: &str) -> Option<SplitKind> {
        Self::ALL.iter().copied().find(|k| k.as_str() == s)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub width: u32,
    pub height: u32,
    pub n_frames: usize,
    pub fps: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_train: 12,
            n_test: 4,
            width: 96,
            height: 96,
            n_frames: 8,
            fps: 20.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub spec: BenchmarkSpec,
    pub splits: Vec<SplitEntry>,
}

#[derive(Serialize, Deserialize)]
struct SeqMeta {
    width: u32,
    height: u32,
    fps: f64,
    timestamps: Vec<f64>,
    visibility: Vec<bool>,
}

fn seq_seed(base: u64, split_idx: usize, i: usize) -> u64 {
    base ^ (split_idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (i as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Target speed ranges: the fast split's per-frame displacement stays well
/// above three times the easy split's.
fn speed_range(split: SplitKind) -> (f64, f64) {
    match split {
        SplitKind::FastMotion => (90.0, 160.0),
        _ => (25.0, 45.0),
    }
}

fn scene_spec(split: SplitKind, bench: &BenchmarkSpec, rng: &mut ChaCha12Rng) -> SceneSpec {
    let (w, h) = (bench.width as f64, bench.height as f64);
    let duration = bench.n_frames as f64 / bench.fps;
    let size = rng.gen_range(14.0..22.0);
    let (lo, hi) = speed_range(split);
    let speed = rng.gen_range(lo..hi);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let vel = (speed * angle.cos(), speed * angle.sin());
    // start offset so the full trajectory stays inside the canvas
    let mid = (
        w / 2.0 + rng.gen_range(-10.0..10.0),
        h / 2.0 + rng.gen_range(-10.0..10.0),
    );
    let pos0 = (mid.0 - vel.0 * duration / 2.0, mid.1 - vel.1 * duration / 2.0);
    // the event sensor sees luminance, so the target must contrast with the
    // mid-gray background in brightness, not just hue
    let color = if rng.gen_bool(0.5) {
        [
            rng.gen_range(0.78..0.98),
            rng.gen_range(0.72..0.98),
            rng.gen_range(0.72..0.98),
        ]
    } else {
        [
            rng.gen_range(0.02..0.16),
            rng.gen_range(0.02..0.16),
            rng.gen_range(0.02..0.18),
        ]
    };
    let target = MovingShape {
        kind: if rng.gen_bool(0.5) { ShapeKind::Square } else { ShapeKind::Disk },
        size,
        size_rate: rng.gen_range(-0.08..0.12),
        color,
        pos0,
        vel,
        wobble_amp: rng.gen_range(0.0..1.5),
        wobble_hz: rng.gen_range(0.3..1.2),
    };
    let distractors = if matches!(split, SplitKind::Distractor) {
        (0..2)
            .map(|_| {
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let sp = rng.gen_range(lo..hi);
                let off_ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let off = rng.gen_range(28.0..40.0);
                MovingShape {
                    kind: target.kind,
                    size: size * rng.gen_range(0.8..1.2),
                    size_rate: 0.0,
                    color: [
                        (color[0] + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0),
                        (color[1] + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0),
                        (color[2] + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0),
                    ],
                    pos0: (
                        (mid.0 + off * off_ang.cos()).clamp(10.0, w - 10.0),
                        (mid.1 + off * off_ang.sin()).clamp(10.0, h - 10.0),
                    ),
                    vel: (sp * ang.cos(), sp * ang.sin()),
                    wobble_amp: 0.0,
                    wobble_hz: 0.0,
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let illumination = match split {
        SplitKind::LowLight => Illumination::Constant(0.04),
        SplitKind::Overexposed => Illumination::Constant(4.5),
        _ => Illumination::Constant(1.0),
    };
    SceneSpec {
        width: bench.width,
        height: bench.height,
        n_frames: bench.n_frames,
        fps: bench.fps,
        target,
        distractors,
        background_seed: rng.gen(),
        illumination,
    }
}

fn save_frame_png(path: &Path, frame: &Array3<f64>) -> Result<()> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (frame[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn load_frame_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f64>::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

fn write_events_csv(path: &Path, stream: &EventStream) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "x", "y", "p"])?;
    for e in stream.events() {
        w.write_record([
            e.t.to_string(),
            e.x.to_string(),
            e.y.to_string(),
            e.p.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn read_events_csv(path: &Path, width: u32, height: u32) -> Result<EventStream> {
    let mut r = csv::Reader::from_path(path)?;
    let mut events = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        events.push(Event {
            t: rec[0].parse()?,
            x: rec[1].parse()?,
            y: rec[2].parse()?,
            p: rec[3].parse()?,
        });
    }
    Ok(EventStream::new(width, height, events)?)
}

pub fn write_boxes_csv(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame", "cx", "cy", "w", "h"])?;
    for (i, b) in boxes.iter().enumerate() {
        w.write_record([
            i.to_string(),
            b.cx.to_string(),
            b.cy.to_string(),
            b.w.to_string(),
            b.h.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_boxes_csv(path: &Path) -> Result<Vec<BoundingBox>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut boxes = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let frame: usize = rec[0].parse()?;
        if frame != i {
            bail!("box CSV rows out of order at {i}");
        }
        boxes.push(BoundingBox::new(
            rec[1].parse()?,
            rec[2].parse()?,
            rec[3].parse()?,
            rec[4].parse()?,
        )?);
    }
    Ok(boxes)
}

fn write_sequence(dir: &Path, bench: &BenchmarkSpec, spec: &SceneSpec, sim_seed: u64) -> Result<()> {
    let scene = render_scene(spec)?;
    // events come from the unclipped irradiance: the event sensor keeps its
    // contrast where the frame pipeline saturates (overexposed) or is
    // crushed into the bottom PNG codes (low light)
    let events = simulate_events_with(
        &scene.radiance,
        &scene.timestamps,
        EventSimConfig { threshold: 0.15, jitter: 0.05, seed: sim_seed },
    )?;
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    for (i, f) in scene.frames.iter().enumerate() {
        save_frame_png(&frames_dir.join(format!("{i:05}.png")), f)?;
    }
    write_events_csv(&dir.join("events.csv"), &events)?;
    write_boxes_csv(&dir.join("gt.csv"), &scene.boxes)?;
    let visibility: Vec<bool> = scene
        .boxes
        .iter()
        .map(|b| {
            b.cx >= 0.0 && b.cx < bench.width as f64 && b.cy >= 0.0 && b.cy < bench.height as f64
        })
        .collect();
    let meta = SeqMeta {
        width: bench.width,
        height: bench.height,
        fps: bench.fps,
        timestamps: scene.timestamps.clone(),
        visibility,
    };
    fs::write(dir.join("seq.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Generate the full benchmark under `root`. Sequences are deterministic in
/// `spec.seed`; the split and index derive disjoint per-sequence seeds.
pub fn build_benchmark(root: &Path, spec: &BenchmarkSpec) -> Result<Manifest> {
    if spec.n_train == 0 || spec.n_test == 0 {
        bail!("n_train and n_test must be positive");
    }
    fs::create_dir_all(root)?;
    let mut splits = Vec::new();
    for (split_idx, split) in SplitKind::ALL.iter().enumerate() {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for i in 0..spec.n_train + spec.n_test {
            let s = seq_seed(spec.seed, split_idx, i);
            let mut rng = ChaCha12Rng::seed_from_u64(s);
            let scene = scene_spec(*split, spec, &mut rng);
            let rel = format!("{}/seq_{i:03}", split.as_str());
            let dir = root.join(&rel);
            fs::create_dir_all(&dir)?;
            write_sequence(&dir, spec, &scene, s ^ 0x5bf0_3635)?;
            if i < spec.n_train {
                train.push(rel);
            } else {
                test.push(rel);
            }
        }
        splits.push(SplitEntry { name: split.as_str().to_string(), train, test });
    }
    let manifest = Manifest { version: MANIFEST_VERSION, spec: spec.clone(), splits };
    fs::write(
        root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let raw = fs::read_to_string(root.join("manifest.json"))
        .with_context(|| format!("no manifest under {}", root.display()))?;
    let m: Manifest = serde_json::from_str(&raw)?;
    if m.version != MANIFEST_VERSION {
        bail!("manifest version {} unsupported", m.version);
    }
    Ok(m)
}

/// Load one sequence directory back into tracker form.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let raw = fs::read_to_string(dir.join("seq.json"))
        .with_context(|| format!("no seq.json under {}", dir.display()))?;
    let meta: SeqMeta = serde_json::from_str(&raw)?;
    let n = meta.timestamps.len();
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        frames.push(load_frame_png(&dir.join("frames").join(format!("{i:05}.png")))?);
    }
    let events = read_events_csv(&dir.join("events.csv"), meta.width, meta.height)?;
    let gt = read_boxes_csv(&dir.join("gt.csv"))?;
    if gt.len() != n || meta.visibility.len() != n {
        bail!("sequence {} arrays disagree", dir.display());
    }
    Ok(Sequence {
        frames,
        timestamps: meta.timestamps,
        events,
        gt,
        visibility: meta.visibility,
    })
}

/// Relative sequence paths for the chosen splits, train or test part.
pub fn split_paths<'a>(
    manifest: &'a Manifest,
    splits: &[SplitKind],
    test: bool,
) -> Vec<&'a String> {
    manifest
        .splits
        .iter()
        .filter(|s| splits.iter().any(|k| k.as_str() == s.name))
        .flat_map(|s| if test { s.test.iter() } else { s.train.iter() })
        .collect()
}
