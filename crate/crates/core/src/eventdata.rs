//! Event-stream ingestion, binning, frame differencing, and the bundled
//! synthetic datasets.
//!
//! Events are (x, y, t, p) records with polarity ±1 on the wire; the ternary
//! {−1, 0, 1} view only exists at the frame level, where 0 means "no event
//! at this pixel". Binning splits a stream's time span uniformly into T
//! two-channel frames (channel 0 positive, channel 1 negative).
//!
//! `frames_to_events` converts grayscale video to events by thresholding
//! consecutive-frame differences. The dynamic policy bisects the contrast
//! threshold per transition until the emitted event ratio lands in a band
//! around the target, flagging transitions where the band is unreachable.
//!
//! The synthetic tasks draw ten parametric glyphs (bars, crosses, rings,
//! discs, outlines, dot grids) with per-sample jitter; the moving variant
//! renders short trajectories and converts them to events, targeting an
//! event ratio of 0.15.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const EVENTS_MAGIC: &[u8; 4] = b"ESEV";
pub const EVENTS_VERSION: u16 = 1;
pub const MANIFEST_VERSION: u16 = 1;

/// One sensor event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventRecord {
    pub x: u16,
    pub y: u16,
    /// Microsecond-scale integer timestamp.
    pub t: u32,
    /// +1 or −1.
    pub p: i8,
}

/// A bounds-checked, time-ordered list of events over an H×W sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    height: u16,
    width: u16,
    records: Vec<EventRecord>,
}

impl EventStream {
    /// Validates coordinates, polarities, and timestamp order.
    pub fn new(height: u16, width: u16, records: Vec<EventRecord>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract("EventStream::new", "empty sensor"));
        }
        let mut last_t = 0u32;
        for (i, r) in records.iter().enumerate() {
            if r.x >= width || r.y >= height {
                return Err(Error::Data(format!(
                    "event {} at ({}, {}) outside {}x{} sensor",
                    i, r.x, r.y, width, height
                )));
            }
            if r.p != 1 && r.p != -1 {
                return Err(Error::Data(format!("event {} polarity {} not in {{-1, +1}}", i, r.p)));
            }
            if i > 0 && r.t < last_t {
                return Err(Error::Data(format!(
                    "event {} timestamp {} decreases (previous {})",
                    i, r.t, last_t
                )));
            }
            last_t = r.t;
        }
        Ok(EventStream {
            height,
            width,
            records,
        })
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameMode {
    /// Per-pixel event counts.
    Count,
    /// Per-pixel 0/1 occupancy; the default input encoding for spiking runs.
    Binary,
}

/// Bins a stream into [T, 2, H, W] frames by uniform time slices. The bin of
/// an event is `(t − t0)·T / (duration + 1)` in integer arithmetic, so a
/// zero-duration stream lands entirely in frame 0 and the last event always
/// fits the last frame.
pub fn bin_events(es: &EventStream, t_steps: usize, mode: FrameMode) -> Result<Tensor> {
    if t_steps == 0 {
        return Err(Error::contract("bin_events", "T must be >= 1"));
    }
    let (h, w) = (es.height as usize, es.width as usize);
    let mut out = Tensor::zeros(&[t_steps, 2, h, w]);
    if es.records.is_empty() {
        return Ok(out);
    }
    let t0 = es.records[0].t as u64;
    let duration = es.records.last().unwrap().t as u64 - t0;
    let data = out.data_mut();
    for r in &es.records {
        let bin = ((r.t as u64 - t0) * t_steps as u64 / (duration + 1)) as usize;
        let ch = if r.p > 0 { 0 } else { 1 };
        let idx = ((bin * 2 + ch) * h + r.y as usize) * w + r.x as usize;
        match mode {
            FrameMode::Count => data[idx] += 1.0,
            FrameMode::Binary => data[idx] = 1.0,
        }
    }
    Ok(out)
}

/// Fraction of pixel sites carrying an event in one binary [2, H, W] frame:
/// (#positive + #negative) / (H·W).
pub fn event_ratio(frame: &Tensor) -> Result<f64> {
    let s = frame.shape();
    if frame.rank() != 3 || s[0] != 2 {
        return Err(Error::shape(
            "event_ratio",
            format!("expected a [2,H,W] frame, got {:?}", s),
        ));
    }
    if frame.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(
            "event_ratio",
            "frame is not binary; bin with FrameMode::Binary first",
        ));
    }
    Ok(frame.sum() / (s[1] * s[2]) as f64)
}

/// Extracts step `t` of a [T, 2, H, W] tensor as a [2, H, W] frame.
pub fn frame_slice(frames: &Tensor, t: usize) -> Result<Tensor> {
    let s = frames.shape();
    if frames.rank() != 4 || s[1] != 2 {
        return Err(Error::shape(
            "frame_slice",
            format!("expected [T,2,H,W], got {:?}", s),
        ));
    }
    if t >= s[0] {
        return Err(Error::contract(
            "frame_slice",
            format!("step {} out of range for T={}", t, s[0]),
        ));
    }
    let frame_len = 2 * s[2] * s[3];
    Tensor::new(&[2, s[2], s[3]], frames.data()[t * frame_len..(t + 1) * frame_len].to_vec())
}

/// Contrast-threshold policy for frame differencing.
#[derive(Debug, Clone, Copy)]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// Bisect the threshold within [theta_min, theta_max] per transition
    /// until the event ratio is within `band` of `target`.
    Dynamic {
        target: f64,
        band: f64,
        theta_min: f64,
        theta_max: f64,
    },
}

impl ThresholdPolicy {
    /// Dynamic policy aimed at the standard 0.15 event ratio.
    pub fn dynamic_default() -> Self {
        ThresholdPolicy::Dynamic {
            target: 0.15,
            band: 0.03,
            theta_min: 0.02,
            theta_max: 1.0,
        }
    }
}

/// Per-transition conversion diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct FrameConversion {
    pub theta: f64,
    pub ratio: f64,
    /// False when the ratio band was unreachable and the threshold
    /// saturated at a bound.
    pub in_band: bool,
}

#[derive(Debug, Clone)]
pub struct EsConversion {
    pub stream: EventStream,
    pub frames: Vec<FrameConversion>,
}

/// Converts grayscale video [T, H, W] to events: each consecutive-frame
/// difference with |Δ| > threshold emits one event of polarity sign(Δ) at
/// timestamp (i+1)·1000.
pub fn frames_to_events(frames: &Tensor, policy: &ThresholdPolicy) -> Result<EsConversion> {
    let s = frames.shape();
    if frames.rank() != 3 {
        return Err(Error::shape(
            "frames_to_events",
            format!("expected [T,H,W] video, got {:?}", s),
        ));
    }
    let (t_frames, h, w) = (s[0], s[1], s[2]);
    if t_frames < 2 {
        return Err(Error::contract("frames_to_events", "need at least 2 frames"));
    }
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::contract("frames_to_events", "frame exceeds u16 coordinates"));
    }
    let plane = h * w;
    let sites = plane as f64;
    let count_over = |diff: &[f64], theta: f64| -> usize {
        diff.iter().filter(|d| d.abs() > theta).count()
    };

    let mut records = Vec::new();
    let mut reports = Vec::with_capacity(t_frames - 1);
    let mut diff = vec![0.0f64; plane];
    for i in 0..t_frames - 1 {
        let a = &frames.data()[i * plane..(i + 1) * plane];
        let b = &frames.data()[(i + 1) * plane..(i + 2) * plane];
        for (d, (&xb, &xa)) in diff.iter_mut().zip(b.iter().zip(a)) {
            *d = xb - xa;
        }
        let (theta, ratio, in_band) = match *policy {
            ThresholdPolicy::Fixed(theta) => {
                let ratio = count_over(&diff, theta) as f64 / sites;
                (theta, ratio, true)
            }
            ThresholdPolicy::Dynamic {
                target,
                band,
                theta_min,
                theta_max,
            } => {
                // The ratio is nonincreasing in theta; bisect toward the
                // band, keeping the best threshold seen in case the discrete
                // ratio steps over it.
                let ratio_at = |theta: f64| count_over(&diff, theta) as f64 / sites;
                let r_lo = ratio_at(theta_min);
                let r_hi = ratio_at(theta_max);
                if r_lo < target - band {
                    (theta_min, r_lo, false)
                } else if r_hi > target + band {
                    (theta_max, r_hi, false)
                } else {
                    let (mut lo, mut hi) = (theta_min, theta_max);
                    let (mut best_t, mut best_r) = if (r_lo - target).abs() <= (r_hi - target).abs()
                    {
                        (theta_min, r_lo)
                    } else {
                        (theta_max, r_hi)
                    };
                    for _ in 0..48 {
                        let mid = 0.5 * (lo + hi);
                        let r = ratio_at(mid);
                        if (r - target).abs() < (best_r - target).abs() {
                            best_t = mid;
                            best_r = r;
                        }
                        if (r - target).abs() <= band {
                            break;
                        }
                        if r > target {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    (best_t, best_r, (best_r - target).abs() <= band)
                }
            }
        };
        let t_stamp = ((i + 1) * 1000) as u32;
        for y in 0..h {
            for x in 0..w {
                let d = diff[y * w + x];
                if d.abs() > theta {
                    records.push(EventRecord {
                        x: x as u16,
                        y: y as u16,
                        t: t_stamp,
                        p: if d > 0.0 { 1 } else { -1 },
                    });
                }
            }
        }
        reports.push(FrameConversion {
            theta,
            ratio,
            in_band,
        });
    }
    Ok(EsConversion {
        stream: EventStream::new(h as u16, w as u16, records)?,
        frames: reports,
    })
}

fn read_exact(r: &mut impl IoRead, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Corrupt {
        path: path.display().to_string(),
        detail: format!("truncated while reading {}", what),
    })
}

/// Writes a stream in the fixed-width binary container (all little-endian).
pub fn save_events(es: &EventStream, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EVENTS_MAGIC)?;
    w.write_all(&EVENTS_VERSION.to_le_bytes())?;
    w.write_all(&es.height.to_le_bytes())?;
    w.write_all(&es.width.to_le_bytes())?;
    w.write_all(&(es.records.len() as u32).to_le_bytes())?;
    for r in &es.records {
        w.write_all(&r.x.to_le_bytes())?;
        w.write_all(&r.y.to_le_bytes())?;
        w.write_all(&r.t.to_le_bytes())?;
        w.write_all(&r.p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a stream written by [`save_events`], re-validating every record.
pub fn load_events(path: &Path) -> Result<EventStream> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if &magic != EVENTS_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("bad magic {:?}", magic),
        });
    }
    let mut b2 = [0u8; 2];
    read_exact(&mut r, &mut b2, path, "version")?;
    let version = u16::from_le_bytes(b2);
    if version != EVENTS_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("unsupported version {}", version),
        });
    }
    read_exact(&mut r, &mut b2, path, "height")?;
    let height = u16::from_le_bytes(b2);
    read_exact(&mut r, &mut b2, path, "width")?;
    let width = u16::from_le_bytes(b2);
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4, path, "record count")?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        read_exact(&mut r, &mut b2, path, "record x")?;
        let x = u16::from_le_bytes(b2);
        read_exact(&mut r, &mut b2, path, "record y")?;
        let y = u16::from_le_bytes(b2);
        read_exact(&mut r, &mut b4, path, "record t")?;
        let t = u32::from_le_bytes(b4);
        let mut b1 = [0u8; 1];
        read_exact(&mut r, &mut b1, path, "record p")?;
        records.push(EventRecord {
            x,
            y,
            t,
            p: b1[0] as i8,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Corrupt {
            path: path.display().to_string(),
            detail: "trailing bytes after last record".to_string(),
        });
    }
    EventStream::new(height, width, records).map_err(|e| Error::Corrupt {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Writes a tensor as a raw blob: rank u8, dims u32 each, values f32, all
/// little-endian (the same per-parameter encoding checkpoints use).
pub fn save_tensor_blob(t: &Tensor, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&[t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensor_blob(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut b1 = [0u8; 1];
    read_exact(&mut r, &mut b1, path, "rank")?;
    let mut shape = Vec::with_capacity(b1[0] as usize);
    let mut b4 = [0u8; 4];
    for _ in 0..b1[0] {
        read_exact(&mut r, &mut b4, path, "dimension")?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        read_exact(&mut r, &mut b4, path, "data")?;
        data.push(f32::from_le_bytes(b4) as f64);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Corrupt {
            path: path.display().to_string(),
            detail: "trailing bytes after tensor data".to_string(),
        });
    }
    Tensor::new(&shape, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Still glyph images, one channel.
    StaticShapes,
    /// Glyph trajectories rendered to video and converted to events.
    MovingShapes,
}

/// Parameters of a bundled synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task: TaskKind,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    pub hw: usize,
    /// Event-ratio target for the moving task's conversion.
    pub target_event_ratio: f64,
}

impl SyntheticTaskSpec {
    pub fn static_shapes(classes: usize, train_per_class: usize, test_per_class: usize, seed: u64) -> Self {
        SyntheticTaskSpec {
            task: TaskKind::StaticShapes,
            classes,
            train_per_class,
            test_per_class,
            seed,
            hw: 32,
            target_event_ratio: 0.15,
        }
    }

    pub fn moving_shapes(classes: usize, train_per_class: usize, test_per_class: usize, seed: u64) -> Self {
        SyntheticTaskSpec {
            task: TaskKind::MovingShapes,
            ..Self::static_shapes(classes, train_per_class, test_per_class, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > GLYPH_COUNT {
            return Err(Error::Config(format!(
                "classes must be in 1..={}, got {}",
                GLYPH_COUNT, self.classes
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("need at least one sample per class and split".into()));
        }
        if self.hw < 16 || self.hw > 256 {
            return Err(Error::Config(format!("hw must be in 16..=256, got {}", self.hw)));
        }
        if !(0.0 < self.target_event_ratio && self.target_event_ratio < 1.0) {
            return Err(Error::Config("target event ratio must be in (0, 1)".into()));
        }
        Ok(())
    }
}

pub const GLYPH_COUNT: usize = 10;

/// Per-sample pose jitter.
struct GlyphPose {
    dx: f64,
    dy: f64,
    rot: f64,
    scale: f64,
}

fn sd_box(px: f64, py: f64, hx: f64, hy: f64) -> f64 {
    let qx = px.abs() - hx;
    let qy = py.abs() - hy;
    let ox = qx.max(0.0);
    let oy = qy.max(0.0);
    (ox * ox + oy * oy).sqrt() + qx.max(qy).min(0.0)
}

/// Signed distance of the glyph surface at centered coordinates (x, y);
/// negative inside. `r` is the base size in pixels.
fn glyph_sdf(class: usize, x: f64, y: f64, r: f64) -> f64 {
    let len = (x * x + y * y).sqrt();
    let rot45 = |x: f64, y: f64| {
        let c = std::f64::consts::FRAC_1_SQRT_2;
        (c * x + c * y, c * y - c * x)
    };
    match class {
        // Bars at four orientations.
        0 => sd_box(x, y, r, r * 0.28),
        1 => sd_box(x, y, r * 0.28, r),
        2 => {
            let (u, v) = rot45(x, y);
            sd_box(u, v, r, r * 0.28)
        }
        3 => {
            let (u, v) = rot45(x, y);
            sd_box(u, v, r * 0.28, r)
        }
        // Crosses, axis-aligned and diagonal.
        4 => sd_box(x, y, r, r * 0.22).min(sd_box(x, y, r * 0.22, r)),
        5 => {
            let (u, v) = rot45(x, y);
            sd_box(u, v, r, r * 0.22).min(sd_box(u, v, r * 0.22, r))
        }
        6 => (len - r * 0.8).abs() - r * 0.22,
        7 => len - r * 0.62,
        8 => sd_box(x, y, r * 0.75, r * 0.75).abs() - r * 0.2,
        9 => {
            let o = r * 0.55;
            let dot = r * 0.28;
            let mut d = f64::INFINITY;
            for &cx in &[-o, o] {
                for &cy in &[-o, o] {
                    let ddx = x - cx;
                    let ddy = y - cy;
                    d = d.min((ddx * ddx + ddy * ddy).sqrt() - dot);
                }
            }
            d
        }
        _ => unreachable!("glyph class out of range"),
    }
}

/// Renders one glyph to an [H, W] intensity image in [0, 1] with a soft
/// antialiased edge.
fn render_glyph(class: usize, hw: usize, pose: &GlyphPose) -> Tensor {
    let mut img = Tensor::zeros(&[hw, hw]);
    let center = (hw as f64 - 1.0) / 2.0;
    let r = hw as f64 * 0.32;
    let (sin, cos) = pose.rot.sin_cos();
    let data = img.data_mut();
    for yi in 0..hw {
        for xi in 0..hw {
            let px = (xi as f64 - center - pose.dx) / pose.scale;
            let py = (yi as f64 - center - pose.dy) / pose.scale;
            // Rotate the sample point by −rot so the glyph appears rotated
            // by +rot.
            let rx = cos * px + sin * py;
            let ry = cos * py - sin * px;
            let d = glyph_sdf(class, rx, ry, r);
            let v = (0.5 - d / 1.6).clamp(0.0, 1.0);
            data[yi * hw + xi] = v;
        }
    }
    img
}

fn static_pose(rng: &mut Rng) -> GlyphPose {
    GlyphPose {
        dx: rng.uniform(-2.0, 2.0),
        dy: rng.uniform(-2.0, 2.0),
        rot: rng.uniform(-0.15, 0.15),
        scale: rng.uniform(0.85, 1.1),
    }
}

/// Renders one moving-glyph video of `frames` frames. Translation speed is
/// chosen so each transition disturbs enough pixels for the event-ratio
/// target to be reachable from below. Public so diagnostics can replay the
/// exact video the event converter saw for a given sample rng.
pub fn render_trajectory(class: usize, hw: usize, frames: usize, rng: &mut Rng) -> Tensor {
    let angle = rng.uniform(0.0, std::f64::consts::TAU);
    let speed = rng.uniform(2.4, 3.2);
    let (vx, vy) = (speed * angle.cos(), speed * angle.sin());
    let span = (frames - 1) as f64;
    let start_x = rng.uniform(-1.5, 1.5) - vx * span / 2.0;
    let start_y = rng.uniform(-1.5, 1.5) - vy * span / 2.0;
    let rot0 = rng.uniform(-0.12, 0.12);
    let spin = rng.uniform(-0.03, 0.03);
    let scale = rng.uniform(0.85, 1.1);
    let mut out = Tensor::zeros(&[frames, hw, hw]);
    for f in 0..frames {
        let pose = GlyphPose {
            dx: start_x + vx * f as f64,
            dy: start_y + vy * f as f64,
            rot: rot0 + spin * f as f64,
            scale,
        };
        let img = render_glyph(class, hw, &pose);
        let dst = &mut out.data_mut()[f * hw * hw..(f + 1) * hw * hw];
        dst.copy_from_slice(img.data());
    }
    out
}

pub const TRAJECTORY_FRAMES: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    label: usize,
    split: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u16,
    kind: TaskKind,
    classes: usize,
    height: usize,
    width: usize,
    samples: Vec<ManifestEntry>,
}

/// Writes a synthetic dataset under `out_dir` and returns the manifest
/// path. Output bytes are a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticTaskSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let root = Rng::new(spec.seed);
    let mut entries = Vec::new();
    for (split, per_class) in [("train", spec.train_per_class), ("test", spec.test_per_class)] {
        for class in 0..spec.classes {
            for i in 0..per_class {
                let mut rng = root.derive(&format!("{}/c{}/s{}", split, class, i));
                let (file, ext) = match spec.task {
                    TaskKind::StaticShapes => {
                        let img = render_glyph(class, spec.hw, &static_pose(&mut rng));
                        let sample = img.reshape(&[1, spec.hw, spec.hw])?;
                        let file = format!("{}_c{}_{}.ten", split, class, i);
                        save_tensor_blob(&sample, &out_dir.join(&file))?;
                        (file, "ten")
                    }
                    TaskKind::MovingShapes => {
                        let video = render_trajectory(class, spec.hw, TRAJECTORY_FRAMES, &mut rng);
                        let policy = ThresholdPolicy::Dynamic {
                            target: spec.target_event_ratio,
                            band: 0.03,
                            theta_min: 0.02,
                            theta_max: 1.0,
                        };
                        let conv = frames_to_events(&video, &policy)?;
                        let file = format!("{}_c{}_{}.esev", split, class, i);
                        save_events(&conv.stream, &out_dir.join(&file))?;
                        (file, "esev")
                    }
                };
                let _ = ext;
                entries.push(ManifestEntry {
                    path: file,
                    label: class,
                    split: split.to_string(),
                });
            }
        }
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        kind: spec.task,
        classes: spec.classes,
        height: spec.hw,
        width: spec.hw,
        samples: entries,
    };
    let path = out_dir.join("manifest.json");
    let mut f = BufWriter::new(File::create(&path)?);
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(path)
}

/// One loaded sample, still in its storage form; event samples get binned
/// when the run's T is known.
#[derive(Debug, Clone)]
pub enum SampleData {
    Static(Tensor),
    Events(EventStream),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: TaskKind,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub train: Vec<(SampleData, usize)>,
    pub test: Vec<(SampleData, usize)>,
}

impl Dataset {
    /// Input channel count as consumed by a network.
    pub fn channels(&self) -> usize {
        match self.kind {
            TaskKind::StaticShapes => 1,
            TaskKind::MovingShapes => 2,
        }
    }
}

/// Loads every sample listed in a manifest. Missing files are reported
/// together rather than one at a time.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::Data(format!(
        "cannot read manifest {}: {}",
        manifest_path.display(),
        e
    )))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.display().to_string(),
        detail: format!("manifest is not valid JSON: {}", e),
    })?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Format {
            path: manifest_path.display().to_string(),
            detail: format!("unsupported manifest version {}", manifest.format_version),
        });
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let missing: Vec<String> = manifest
        .samples
        .iter()
        .filter(|e| !base.join(&e.path).exists())
        .map(|e| e.path.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "manifest {} references missing files: {}",
            manifest_path.display(),
            missing.join(", ")
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in &manifest.samples {
        if e.label >= manifest.classes {
            return Err(Error::Data(format!(
                "sample {} label {} out of range for {} classes",
                e.path, e.label, manifest.classes
            )));
        }
        let data = match manifest.kind {
            TaskKind::StaticShapes => SampleData::Static(load_tensor_blob(&base.join(&e.path))?),
            TaskKind::MovingShapes => SampleData::Events(load_events(&base.join(&e.path))?),
        };
        match e.split.as_str() {
            "train" => train.push((data, e.label)),
            "test" => test.push((data, e.label)),
            other => {
                return Err(Error::Data(format!(
                    "sample {} has unknown split {:?}",
                    e.path, other
                )))
            }
        }
    }
    Ok(Dataset {
        kind: manifest.kind,
        classes: manifest.classes,
        height: manifest.height,
        width: manifest.width,
        train,
        test,
    })
}

/// Collapses each event sample of a dynamic dataset into one grayscale
/// event-count image (both polarities summed, scaled by the median nonzero
/// count and clipped to [0, 1] per sample) and writes the result under
/// `out_dir` as an ordinary static dataset. Pretraining an analog network on
/// this reconstruction gives a transfer run a source task whose appearance
/// matches the event frames it later trains on, instead of an unrelated
/// static rendering.
pub fn reconstruct_gray(moving_manifest: &Path, out_dir: &Path) -> Result<PathBuf> {
    let ds = load_dataset(moving_manifest)?;
    if ds.kind != TaskKind::MovingShapes {
        return Err(Error::Data(format!(
            "gray reconstruction needs an event dataset, {} is static",
            moving_manifest.display()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let plane = ds.height * ds.width;
    let mut entries = Vec::new();
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        for (i, (data, label)) in samples.iter().enumerate() {
            let es = match data {
                SampleData::Events(es) => es,
                SampleData::Static(_) => unreachable!("kind is checked above"),
            };
            let counts = bin_events(es, 1, FrameMode::Count)?;
            let d = counts.data();
            let mut img: Vec<f64> = (0..plane).map(|p| d[p] + d[plane + p]).collect();
            // Scale by the median nonzero count and clip: peak scaling lets a
            // few hot pixels crush the rest of the trail to near-black, which
            // starves a downstream net of input energy.
            let mut nz: Vec<f64> = img.iter().cloned().filter(|v| *v > 0.0).collect();
            if !nz.is_empty() {
                nz.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let scale = nz[nz.len() / 2];
                for v in img.iter_mut() {
                    *v = (*v / scale).min(1.0);
                }
            }
            let sample = Tensor::new(&[1, ds.height, ds.width], img)?;
            let file = format!("{}_{}.ten", split, i);
            save_tensor_blob(&sample, &out_dir.join(&file))?;
            entries.push(ManifestEntry {
                path: file,
                label: *label,
                split: split.to_string(),
            });
        }
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        kind: TaskKind::StaticShapes,
        classes: ds.classes,
        height: ds.height,
        width: ds.width,
        samples: entries,
    };
    let path = out_dir.join("manifest.json");
    let mut f = BufWriter::new(File::create(&path)?);
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(path)
}

/// Shapes one sample into network input: static frames become a rank-4
/// single-sample batch broadcast over time; event streams are binned binary
/// at the run's T into a rank-5 [T, 1, 2, H, W] batch.
pub fn sample_input(data: &SampleData, t_steps: usize) -> Result<Tensor> {
    match data {
        SampleData::Static(t) => {
            let s = t.shape().to_vec();
            if t.rank() != 3 {
                return Err(Error::shape(
                    "sample_input",
                    format!("static sample must be [C,H,W], got {:?}", s),
                ));
            }
            t.reshape(&[1, s[0], s[1], s[2]])
        }
        SampleData::Events(es) => {
            let binned = bin_events(es, t_steps, FrameMode::Binary)?;
            let s = binned.shape().to_vec();
            binned.reshape(&[s[0], 1, s[1], s[2], s[3]])
        }
    }
}
