//! Synthetic scenes, event-camera simulation, event binning and crop geometry.
//!
//! The renderer produces float RGB frames in [0, 1]; the simulator derives
//! per-pixel log-luminance and emits signed events at threshold crossings with
//! linearly interpolated timestamps, resetting the per-pixel reference after
//! each event. Binning turns a stream slice into a (T, 3, H, W) tensor of
//! positive counts, negative counts and a normalized signed difference.

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::{CoreError, Result};

/// Intensity floor inside log(I + eps); keeps dark pixels finite.
pub const LOG_EPS: f64 = 1e-3;

/// Fixed cap for count-channel normalization before the network.
pub const COUNT_NORM_CAP: f64 = 5.0;

/// Cap for the signed-difference channel.
pub const DIFF_CAP: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    /// Seconds.
    pub t: f64,
    pub x: u32,
    pub y: u32,
    /// +1 or -1.
    pub p: i8,
}

/// Validated, time-sorted event collection over a fixed sensor size.
#[derive(Clone, Debug, Default)]
pub struct EventStream {
    pub width: u32,
    pub height: u32,
    events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u32, height: u32, events: Vec<Event>) -> Result<Self> {
        let mut last = f64::NEG_INFINITY;
        for e in &events {
            if !(e.p == 1 || e.p == -1) {
                return Err(CoreError::InvariantViolation(format!(
                    "event polarity must be +1/-1, got {}",
                    e.p
                )));
            }
            if e.x >= width || e.y >= height {
                return Err(CoreError::InvariantViolation(format!(
                    "event at ({}, {}) outside {}x{}",
                    e.x, e.y, width, height
                )));
            }
            if !e.t.is_finite() || e.t < last {
                return Err(CoreError::InvariantViolation(
                    "event timestamps must be finite and nondecreasing".into(),
                ));
            }
            last = e.t;
        }
        Ok(Self { width, height, events })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Binned representation: (T, 3, H, W); channel 0 positive counts, channel 1
/// negative counts, channel 2 signed difference clipped to +-DIFF_CAP and
/// shifted/scaled into [0, 1].
#[derive(Clone, Debug)]
pub struct EventTensor {
    pub data: Array4<f64>,
}

impl EventTensor {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.shape()[0] == 0 || data.shape()[1] != 3 {
            return Err(CoreError::InvariantViolation(
                "event tensor needs T >= 1 and 3 channels".into(),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::InvariantViolation("event tensor must be finite".into()));
        }
        let counts = data.slice(ndarray::s![.., 0..2, .., ..]);
        if counts.iter().any(|&v| v < 0.0) {
            return Err(CoreError::InvariantViolation(
                "count channels must be nonnegative".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn steps(&self) -> usize {
        self.data.shape()[0]
    }

    /// Network input: counts divided by a fixed cap and clipped to [0, 1];
    /// the difference channel is already normalized.
    pub fn normalized(&self, cap: f64) -> Array4<f64> {
        let mut out = self.data.clone();
        for mut step in out.axis_iter_mut(Axis(0)) {
            for ch in 0..2 {
                step.index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| (v / cap).min(1.0));
            }
        }
        out
    }
}

/// Center-size box in canvas pixels.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0 && cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite())
        {
            return Err(CoreError::InvalidArgument(format!(
                "degenerate box cx={cx} cy={cy} w={w} h={h}"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ShapeKind {
    Disk,
    Square,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MovingShape {
    pub kind: ShapeKind,
    /// Side / diameter in pixels at t = 0.
    pub size: f64,
    /// Relative size growth per second.
    pub size_rate: f64,
    pub color: [f64; 3],
    pub pos0: (f64, f64),
    /// Pixels per second.
    pub vel: (f64, f64),
    pub wobble_amp: f64,
    pub wobble_hz: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Illumination {
    /// Multiplicative gain, clipped to [0, 1] after application.
    Constant(f64),
}

impl Illumination {
    pub fn normal() -> Self {
        Illumination::Constant(1.0)
    }

    pub fn low_light() -> Self {
        Illumination::Constant(0.04)
    }

    pub fn overexposed() -> Self {
        Illumination::Constant(4.5)
    }

    pub fn gain(&self, _t: f64) -> f64 {
        match self {
            Illumination::Constant(g) => *g,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub n_frames: usize,
    pub fps: f64,
    pub target: MovingShape,
    pub distractors: Vec<MovingShape>,
    pub background_seed: u64,
    pub illumination: Illumination,
}

/// Rendered scene bundle: float frames, per-frame target boxes, timestamps.
#[derive(Clone, Debug)]
pub struct Scene {
    /// Display frames: illumination gain applied, clipped to [0, 1].
    pub frames: Vec<Array3<f64>>,
    /// Linear sensor irradiance: gain applied, no clipping. An event sensor
    /// keeps its contrast where the frame pipeline saturates or crushes.
    pub radiance: Vec<Array3<f64>>,
    pub boxes: Vec<BoundingBox>,
    pub timestamps: Vec<f64>,
}

fn smooth_background(width: u32, height: u32, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (w, h) = (width as usize, height as usize);
    let mut base = Array2::<f64>::zeros((h, w));
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.2..1.8) / width as f64,
                rng.gen_range(0.2..1.8) / height as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.03..0.09),
            )
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.42;
            for &(fx, fy, ph, amp) in &waves {
                v += amp
                    * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + ph).cos();
            }
            base[[y, x]] = v.clamp(0.05, 0.95);
        }
    }
    let tint: [f64; 3] = [
        rng.gen_range(0.9..1.1),
        rng.gen_range(0.9..1.1),
        rng.gen_range(0.9..1.1),
    ];
    let mut out = Array3::<f64>::zeros((3, h, w));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[[c, y, x]] = (base[[y, x]] * tint[c]).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Soft-edged coverage of a shape at a pixel center (~1 px transition band).
fn shape_alpha(kind: ShapeKind, cx: f64, cy: f64, size: f64, px: f64, py: f64) -> f64 {
    match kind {
        ShapeKind::Disk => {
            let r = size / 2.0;
            let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            (r - d + 0.5).clamp(0.0, 1.0)
        }
        ShapeKind::Square => {
            let hw = size / 2.0;
            let ax = (hw - (px - cx).abs() + 0.5).clamp(0.0, 1.0);
            let ay = (hw - (py - cy).abs() + 0.5).clamp(0.0, 1.0);
            ax * ay
        }
    }
}

struct ShapeState {
    pos: (f64, f64),
    vel: (f64, f64),
}

fn advance(
    state: &mut ShapeState,
    shape: &MovingShape,
    dt: f64,
    t_prev: f64,
    t_now: f64,
    size: f64,
    width: f64,
    height: f64,
) {
    let wob = |t: f64| {
        if shape.wobble_amp == 0.0 {
            (0.0, 0.0)
        } else {
            let ph = std::f64::consts::TAU * shape.wobble_hz * t;
            (shape.wobble_amp * ph.sin(), shape.wobble_amp * (ph * 0.7).cos())
        }
    };
    let (wx0, wy0) = wob(t_prev);
    let (wx1, wy1) = wob(t_now);
    state.pos.0 += state.vel.0 * dt + (wx1 - wx0);
    state.pos.1 += state.vel.1 * dt + (wy1 - wy0);
    let half = size / 2.0;
    let (lo_x, hi_x) = (half.min(width / 2.0), (width - half).max(width / 2.0));
    let (lo_y, hi_y) = (half.min(height / 2.0), (height - half).max(height / 2.0));
    if state.pos.0 < lo_x {
        state.pos.0 = 2.0 * lo_x - state.pos.0;
        state.vel.0 = state.vel.0.abs();
    } else if state.pos.0 > hi_x {
        state.pos.0 = 2.0 * hi_x - state.pos.0;
        state.vel.0 = -state.vel.0.abs();
    }
    if state.pos.1 < lo_y {
        state.pos.1 = 2.0 * lo_y - state.pos.1;
        state.vel.1 = state.vel.1.abs();
    } else if state.pos.1 > hi_y {
        state.pos.1 = 2.0 * hi_y - state.pos.1;
        state.vel.1 = -state.vel.1.abs();
    }
    state.pos.0 = state.pos.0.clamp(lo_x, hi_x);
    state.pos.1 = state.pos.1.clamp(lo_y, hi_y);
}

/// Render a scene spec into float frames with per-frame target boxes.
/// Deterministic: same spec, same pixels.
pub fn render_scene(spec: &SceneSpec) -> Result<Scene> {
    if spec.n_frames == 0 || spec.width == 0 || spec.height == 0 {
        return Err(CoreError::InvalidArgument("empty scene".into()));
    }
    if !(spec.fps > 0.0) {
        return Err(CoreError::InvalidArgument("fps must be positive".into()));
    }
    let background = smooth_background(spec.width, spec.height, spec.background_seed);
    let dt = 1.0 / spec.fps;
    let (w, h) = (spec.width as usize, spec.height as usize);
    let mut frames = Vec::with_capacity(spec.n_frames);
    let mut radiance = Vec::with_capacity(spec.n_frames);
    let mut boxes = Vec::with_capacity(spec.n_frames);
    let mut timestamps = Vec::with_capacity(spec.n_frames);

    let mut target_state = ShapeState { pos: spec.target.pos0, vel: spec.target.vel };
    let mut distractor_states: Vec<ShapeState> = spec
        .distractors
        .iter()
        .map(|d| ShapeState { pos: d.pos0, vel: d.vel })
        .collect();

    for f in 0..spec.n_frames {
        let t = f as f64 * dt;
        if f > 0 {
            let t_prev = (f - 1) as f64 * dt;
            let size_now = spec.target.size * (1.0 + spec.target.size_rate * t);
            advance(
                &mut target_state,
                &spec.target,
                dt,
                t_prev,
                t,
                size_now,
                spec.width as f64,
                spec.height as f64,
            );
            for (d, st) in spec.distractors.iter().zip(distractor_states.iter_mut()) {
                let d_size = d.size * (1.0 + d.size_rate * t);
                advance(st, d, dt, t_prev, t, d_size, spec.width as f64, spec.height as f64);
            }
        }
        let gain = spec.illumination.gain(t);
        let mut frame = background.clone();
        let mut paint = |shape: &MovingShape, pos: (f64, f64), size: f64| {
            let reach = size / 2.0 + 1.5;
            let x_lo = ((pos.0 - reach).floor().max(0.0)) as usize;
            let x_hi = ((pos.0 + reach).ceil().min(w as f64 - 1.0)) as usize;
            let y_lo = ((pos.1 - reach).floor().max(0.0)) as usize;
            let y_hi = ((pos.1 + reach).ceil().min(h as f64 - 1.0)) as usize;
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let a = shape_alpha(shape.kind, pos.0, pos.1, size, x as f64 + 0.5, y as f64 + 0.5);
                    if a > 0.0 {
                        for c in 0..3 {
                            frame[[c, y, x]] =
                                (1.0 - a) * frame[[c, y, x]] + a * shape.color[c];
                        }
                    }
                }
            }
        };
        for (d, st) in spec.distractors.iter().zip(distractor_states.iter()) {
            let d_size = d.size * (1.0 + d.size_rate * t);
            paint(d, st.pos, d_size);
        }
        let size_now = spec.target.size * (1.0 + spec.target.size_rate * t);
        paint(&spec.target, target_state.pos, size_now);
        frame.mapv_inplace(|v| v * gain);
        frames.push(frame.mapv(|v| v.clamp(0.0, 1.0)));
        radiance.push(frame);
        boxes.push(BoundingBox::new(
            target_state.pos.0,
            target_state.pos.1,
            size_now,
            size_now,
        )?);
        timestamps.push(t);
    }
    Ok(Scene { frames, radiance, boxes, timestamps })
}

#[derive(Clone, Copy, Debug)]
pub struct EventSimConfig {
    pub threshold: f64,
    /// Relative per-pixel threshold jitter in [0, 1); 0 disables it.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for EventSimConfig {
    fn default() -> Self {
        Self { threshold: 0.15, jitter: 0.0, seed: 0 }
    }
}

fn luminance(frame: &Array3<f64>, x: usize, y: usize) -> f64 {
    (frame[[0, y, x]] + frame[[1, y, x]] + frame[[2, y, x]]) / 3.0
}

/// Simulate events from a frame sequence: per pixel, |delta log I| crossing
/// k thresholds emits k signed events at linearly interpolated times, and the
/// reference level advances with each event. A single frame yields an empty
/// stream. Crossing counts tolerate 1e-9 relative rounding so exact multiples
/// of the threshold count as in real arithmetic.
pub fn simulate_events(
    frames: &[Array3<f64>],
    timestamps: &[f64],
    threshold: f64,
) -> Result<EventStream> {
    simulate_events_with(
        frames,
        timestamps,
        EventSimConfig { threshold, ..EventSimConfig::default() },
    )
}

pub fn simulate_events_with(
    frames: &[Array3<f64>],
    timestamps: &[f64],
    cfg: EventSimConfig,
) -> Result<EventStream> {
    if frames.is_empty() {
        return Err(CoreError::InvalidArgument("no frames".into()));
    }
    if frames.len() != timestamps.len() {
        return Err(CoreError::InvalidArgument(
            "frames and timestamps length mismatch".into(),
        ));
    }
    if !(cfg.threshold > 0.0) {
        return Err(CoreError::InvalidArgument("threshold must be positive".into()));
    }
    let (h, w) = (frames[0].shape()[1], frames[0].shape()[2]);
    for f in frames {
        if f.shape() != frames[0].shape() {
            return Err(CoreError::InvalidArgument("frame shapes differ".into()));
        }
    }
    for win in timestamps.windows(2) {
        if !(win[1] > win[0]) {
            return Err(CoreError::InvalidArgument(
                "timestamps must be strictly increasing".into(),
            ));
        }
    }
    if frames.len() == 1 {
        return EventStream::new(w as u32, h as u32, vec![]);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut events: Vec<Event> = Vec::new();
    let mut log_prev = Array2::<f64>::zeros((h, w));
    let mut reference = Array2::<f64>::zeros((h, w));
    let mut thresholds = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let l0 = (luminance(&frames[0], x, y) + LOG_EPS).ln();
            log_prev[[y, x]] = l0;
            reference[[y, x]] = l0;
            let jitter = if cfg.jitter > 0.0 {
                1.0 + cfg.jitter * rng.gen_range(-1.0..1.0)
            } else {
                1.0
            };
            thresholds[[y, x]] = cfg.threshold * jitter;
        }
    }

    for f in 1..frames.len() {
        let (t_prev, t_now) = (timestamps[f - 1], timestamps[f]);
        for y in 0..h {
            for x in 0..w {
                let cur = (luminance(&frames[f], x, y) + LOG_EPS).ln();
                let prev = log_prev[[y, x]];
                let th = thresholds[[y, x]];
                let diff = cur - reference[[y, x]];
                let n = ((diff.abs() / th) * (1.0 + 1e-9)).floor() as i64;
                if n > 0 {
                    let sign = diff.signum();
                    for k in 1..=n {
                        let level = reference[[y, x]] + sign * th * k as f64;
                        let denom = cur - prev;
                        let frac = if denom.abs() < f64::EPSILON {
                            1.0
                        } else {
                            ((level - prev) / denom).clamp(0.0, 1.0)
                        };
                        events.push(Event {
                            t: t_prev + frac * (t_now - t_prev),
                            x: x as u32,
                            y: y as u32,
                            p: if sign > 0.0 { 1 } else { -1 },
                        });
                    }
                    reference[[y, x]] += sign * th * n as f64;
                }
                log_prev[[y, x]] = cur;
            }
        }
    }

    events.sort_by(|a, b| {
        a.t.partial_cmp(&b.t)
            .unwrap()
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
            .then(a.p.cmp(&b.p))
    });
    EventStream::new(w as u32, h as u32, events)
}

/// Bin the events falling in [t0, t1) into `n_bins` equal windows.
pub fn events_to_frames(
    stream: &EventStream,
    t0: f64,
    t1: f64,
    n_bins: usize,
) -> Result<EventTensor> {
    if n_bins == 0 {
        return Err(CoreError::InvalidArgument("n_bins must be >= 1".into()));
    }
    if stream.width == 0 || stream.height == 0 {
        return Err(CoreError::InvalidArgument("empty sensor size".into()));
    }
    if !(t1 > t0) {
        return Err(CoreError::InvalidArgument("need t1 > t0".into()));
    }
    let (h, w) = (stream.height as usize, stream.width as usize);
    let mut data = Array4::<f64>::zeros((n_bins, 3, h, w));
    let dt = (t1 - t0) / n_bins as f64;
    for e in stream.events() {
        if e.t < t0 || e.t >= t1 {
            continue;
        }
        let bin = (((e.t - t0) / dt) as usize).min(n_bins - 1);
        let ch = if e.p > 0 { 0 } else { 1 };
        data[[bin, ch, e.y as usize, e.x as usize]] += 1.0;
    }
    for b in 0..n_bins {
        for y in 0..h {
            for x in 0..w {
                let d = data[[b, 0, y, x]] - data[[b, 1, y, x]];
                data[[b, 2, y, x]] = (d.clamp(-DIFF_CAP, DIFF_CAP) + DIFF_CAP) / (2.0 * DIFF_CAP);
            }
        }
    }
    EventTensor::new(data)
}

/// Canvas -> crop mapping: crop_x = (canvas_x - x0) * scale.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Affine {
    pub x0: f64,
    pub y0: f64,
    pub scale: f64,
}

impl Affine {
    pub fn to_crop(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox {
            cx: (b.cx - self.x0) * self.scale,
            cy: (b.cy - self.y0) * self.scale,
            w: b.w * self.scale,
            h: b.h * self.scale,
        }
    }

    pub fn to_canvas(&self, b: &BoundingBox) -> BoundingBox {
        BoundingBox {
            cx: b.cx / self.scale + self.x0,
            cy: b.cy / self.scale + self.y0,
            w: b.w / self.scale,
            h: b.h / self.scale,
        }
    }
}

fn sample_bilinear(plane: &ArrayView2<'_, f64>, x: f64, y: f64) -> f64 {
    let (h, w) = (plane.shape()[0] as isize, plane.shape()[1] as isize);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut acc = 0.0;
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let xi = x0 as isize + dx;
            let yi = y0 as isize + dy;
            if xi >= 0 && xi < w && yi >= 0 && yi < h && wx * wy != 0.0 {
                acc += wx * wy * plane[[yi as usize, xi as usize]];
            }
        }
    }
    acc
}

fn crop_plane(plane: &ArrayView2<'_, f64>, aff: &Affine, out_size: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((out_size, out_size));
    for oy in 0..out_size {
        for ox in 0..out_size {
            let sx = aff.x0 + (ox as f64 + 0.5) / aff.scale - 0.5;
            let sy = aff.y0 + (oy as f64 + 0.5) / aff.scale - 0.5;
            out[[oy, ox]] = sample_bilinear(plane, sx, sy);
        }
    }
    out
}

fn crop_affine(b: &BoundingBox, context: f64, out_size: usize) -> Result<Affine> {
    if !(context > 0.0) || out_size == 0 {
        return Err(CoreError::InvalidArgument("bad crop parameters".into()));
    }
    BoundingBox::new(b.cx, b.cy, b.w, b.h)?;
    let side = context * (b.w * b.h).sqrt();
    Ok(Affine {
        x0: b.cx - side / 2.0,
        y0: b.cy - side / 2.0,
        scale: out_size as f64 / side,
    })
}

/// Square crop around a box (side = context * sqrt(w*h)), zero padding
/// outside the canvas, bilinear resize to `out_size`. Returns the crop and
/// the canvas->crop affine (its inverse recovers canvas boxes).
pub fn crop_resize_image(
    src: &Array3<f64>,
    b: &BoundingBox,
    context: f64,
    out_size: usize,
) -> Result<(Array3<f64>, Affine)> {
    let aff = crop_affine(b, context, out_size)?;
    let c = src.shape()[0];
    let mut out = Array3::<f64>::zeros((c, out_size, out_size));
    for ci in 0..c {
        out.index_axis_mut(Axis(0), ci)
            .assign(&crop_plane(&src.index_axis(Axis(0), ci), &aff, out_size));
    }
    Ok((out, aff))
}

/// Same geometry applied to every (step, channel) plane of an event tensor.
pub fn crop_resize_events(
    src: &Array4<f64>,
    b: &BoundingBox,
    context: f64,
    out_size: usize,
) -> Result<(Array4<f64>, Affine)> {
    let aff = crop_affine(b, context, out_size)?;
    let (t, c) = (src.shape()[0], src.shape()[1]);
    let mut out = Array4::<f64>::zeros((t, c, out_size, out_size));
    for ti in 0..t {
        for ci in 0..c {
            let plane = src.index_axis(Axis(0), ti);
            let plane = plane.index_axis(Axis(0), ci);
            out.index_axis_mut(Axis(0), ti)
                .index_axis_mut(Axis(0), ci)
                .assign(&crop_plane(&plane, &aff, out_size));
        }
    }
    Ok((out, aff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn static_spec() -> SceneSpec {
        SceneSpec {
            width: 48,
            height: 36,
            n_frames: 10,
            fps: 30.0,
            target: MovingShape {
                kind: ShapeKind::Square,
                size: 10.0,
                size_rate: 0.0,
                color: [0.9, 0.3, 0.2],
                pos0: (24.0, 18.0),
                vel: (0.0, 0.0),
                wobble_amp: 0.0,
                wobble_hz: 0.0,
            },
            distractors: vec![],
            background_seed: 7,
            illumination: Illumination::normal(),
        }
    }

    #[test]
    fn stationary_target_keeps_its_box() {
        let scene = render_scene(&static_spec()).unwrap();
        assert_eq!(scene.boxes.len(), 10);
        for b in &scene.boxes {
            assert_eq!(b.cx, 24.0);
            assert_eq!(b.cy, 18.0);
            assert_eq!(b.w, 10.0);
        }
    }

    #[test]
    fn linear_motion_advances_center() {
        let mut spec = static_spec();
        spec.target.vel = (60.0, 0.0); // 2 px per frame at 30 fps
        let scene = render_scene(&spec).unwrap();
        for (f, b) in scene.boxes.iter().enumerate() {
            assert!((b.cx - (24.0 + 2.0 * f as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_scene(&static_spec()).unwrap();
        let b = render_scene(&static_spec()).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn target_stays_in_canvas() {
        let mut spec = static_spec();
        spec.target.vel = (400.0, 250.0);
        spec.n_frames = 60;
        let scene = render_scene(&spec).unwrap();
        for b in &scene.boxes {
            assert!(b.cx > 0.0 && b.cx < spec.width as f64);
            assert!(b.cy > 0.0 && b.cy < spec.height as f64);
        }
    }

    fn one_pixel_frames(levels: &[f64]) -> Vec<Array3<f64>> {
        levels
            .iter()
            .map(|&l| {
                // invert log(I + eps) so delta log I hits the level exactly
                let i = l.exp() - LOG_EPS;
                Array3::from_elem((3, 1, 1), i)
            })
            .collect()
    }

    #[test]
    fn constant_video_gives_no_events() {
        let frames = one_pixel_frames(&[0.3; 5]);
        let ts = vec![0.0, 0.1, 0.2, 0.3, 0.4];
        let s = simulate_events(&frames, &ts, 0.2).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn step_of_three_thresholds_gives_three_events() {
        let frames = one_pixel_frames(&[0.0, 0.6]);
        let ts = vec![0.0, 1.0];
        let s = simulate_events(&frames, &ts, 0.2).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.events().iter().all(|e| e.p == 1));
        let times: Vec<f64> = s.events().iter().map(|e| e.t).collect();
        for (k, &t) in times.iter().enumerate() {
            assert!((t - (k as f64 + 1.0) / 3.0).abs() < 1e-6, "time {t} for crossing {k}");
        }
    }

    #[test]
    fn inverted_video_flips_polarity() {
        let frames = one_pixel_frames(&[0.0, 0.45, 0.9]);
        let inv = one_pixel_frames(&[0.0, -0.45, -0.9]);
        let ts = vec![0.0, 0.5, 1.0];
        let a = simulate_events(&frames, &ts, 0.2).unwrap();
        let b = simulate_events(&inv, &ts, 0.2).unwrap();
        assert_eq!(a.len(), b.len());
        for (ea, eb) in a.events().iter().zip(b.events()) {
            assert_eq!(ea.p, -eb.p);
            assert!((ea.t - eb.t).abs() < 1e-9);
        }
    }

    #[test]
    fn single_frame_is_empty_stream() {
        let frames = one_pixel_frames(&[0.3]);
        let s = simulate_events(&frames, &[0.0], 0.2).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn bad_threshold_is_rejected() {
        let frames = one_pixel_frames(&[0.0, 0.5]);
        assert!(simulate_events(&frames, &[0.0, 1.0], 0.0).is_err());
        assert!(simulate_events(&frames, &[0.0, 1.0], -0.1).is_err());
    }

    #[test]
    fn binning_is_empty_for_empty_stream() {
        let s = EventStream::new(4, 4, vec![]).unwrap();
        let t = events_to_frames(&s, 0.0, 1.0, 3).unwrap();
        assert_eq!(t.data.shape(), &[3, 3, 4, 4]);
        let counts = t.data.slice(ndarray::s![.., 0..2, .., ..]);
        assert_eq!(counts.sum(), 0.0);
    }

    #[test]
    fn binning_places_single_event() {
        let s = EventStream::new(
            4,
            4,
            vec![Event { t: 0.35, x: 2, y: 1, p: -1 }],
        )
        .unwrap();
        let t = events_to_frames(&s, 0.0, 1.0, 2).unwrap();
        assert_eq!(t.data[[0, 1, 1, 2]], 1.0);
        assert_eq!(t.data.slice(ndarray::s![.., 0, .., ..]).sum(), 0.0);
        // diff channel shifted: -1 -> (-1 + 5) / 10
        assert!((t.data[[0, 2, 1, 2]] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn count_conservation_and_window() {
        let evs = vec![
            Event { t: 0.05, x: 0, y: 0, p: 1 },
            Event { t: 0.55, x: 1, y: 1, p: -1 },
            Event { t: 0.95, x: 2, y: 2, p: 1 },
            Event { t: 1.25, x: 3, y: 3, p: 1 }, // outside window
        ];
        let s = EventStream::new(4, 4, evs).unwrap();
        let t = events_to_frames(&s, 0.0, 1.0, 4).unwrap();
        let total = t.data.slice(ndarray::s![.., 0..2, .., ..]).sum();
        assert_eq!(total, 3.0);
    }

    #[test]
    fn normalization_caps_counts() {
        let mut data = Array4::<f64>::zeros((1, 3, 2, 2));
        data[[0, 0, 0, 0]] = 12.0;
        data[[0, 1, 0, 1]] = 2.0;
        let t = EventTensor::new(data).unwrap();
        let n = t.normalized(COUNT_NORM_CAP);
        assert_eq!(n[[0, 0, 0, 0]], 1.0);
        assert!((n[[0, 1, 0, 1]] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn stream_validation_rejects_bad_events() {
        assert!(EventStream::new(2, 2, vec![Event { t: 0.0, x: 5, y: 0, p: 1 }]).is_err());
        assert!(EventStream::new(2, 2, vec![Event { t: 0.0, x: 0, y: 0, p: 0 }]).is_err());
        assert!(EventStream::new(
            2,
            2,
            vec![
                Event { t: 1.0, x: 0, y: 0, p: 1 },
                Event { t: 0.5, x: 0, y: 0, p: 1 }
            ]
        )
        .is_err());
    }

    #[test]
    fn crop_roundtrip_recovers_box() {
        let scene = render_scene(&static_spec()).unwrap();
        let b = scene.boxes[0];
        let (_crop, aff) = crop_resize_image(&scene.frames[0], &b, 2.0, 64).unwrap();
        let in_crop = aff.to_crop(&b);
        let back = aff.to_canvas(&in_crop);
        assert!((back.cx - b.cx).abs() < 0.5);
        assert!((back.cy - b.cy).abs() < 0.5);
        assert!((back.w - b.w).abs() < 0.5);
        // target centered in its own crop
        assert!((in_crop.cx - 32.0).abs() < 1e-9);
    }

    #[test]
    fn crop_pads_outside_with_zeros() {
        let frame = Array3::<f64>::from_elem((3, 20, 20), 0.8);
        let b = BoundingBox::new(1.0, 1.0, 8.0, 8.0).unwrap();
        let (crop, _aff) = crop_resize_image(&frame, &b, 4.0, 32).unwrap();
        // crop spans [-15, 17): most of the upper-left quadrant is padding
        assert_eq!(crop[[0, 0, 0]], 0.0);
        assert!(crop[[0, 31, 31]] > 0.0);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let frame = Array3::<f64>::zeros((3, 8, 8));
        let b = BoundingBox { cx: 4.0, cy: 4.0, w: 0.0, h: 2.0 };
        assert!(crop_resize_image(&frame, &b, 2.0, 16).is_err());
    }
}
