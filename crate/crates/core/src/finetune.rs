//! Stage 2: augmented fine-tuning of the correction head.
//!
//! The head is trained with plain gradient descent and a cosine-annealed step
//! size, either to reproduce pseudo-labels or, as baselines, to minimize
//! photometric and smoothness losses on the model's own dense output.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::consistency::{FlowLabel, PseudoLabelSet};
use crate::error::{Error, Result};
use crate::loss::iteration_weight;
use crate::models::{
    accumulate_label_gradient, GradientSum, HeadWeights, PairContext, PointLabel, ReferenceModel, FEATURES,
};
use crate::rng::RngStream;
use crate::sampling::{sample_rgb, sample_rgb_grad, warp_backward};
use crate::types::{FlowField, Frame, Trajectory, VideoClip, CHANNELS};

/// Randomized photometric and geometric perturbations.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSpec {
    /// Additive brightness offset range.
    pub brightness: (f64, f64),
    /// Contrast factor range, applied about each frame's mean color.
    pub contrast: (f64, f64),
    /// Crop side length as a fraction of the frame side.
    pub crop: (f64, f64),
    /// Zoom factor applied to the crop.
    pub scale: (f64, f64),
    /// Fixed output size `(width, height)`, overriding `scale`.
    pub resize: Option<(usize, usize)>,
    /// Number of occluding rectangles painted on the target frame.
    pub occluders: (usize, usize),
    /// Occluder side length range, px.
    pub occluder_size: (f64, f64),
    pub hflip: f64,
    pub vflip: f64,
}

impl AugmentationSpec {
    /// A spec that leaves every sample unchanged.
    pub fn identity() -> Self {
        AugmentationSpec {
            brightness: (0.0, 0.0),
            contrast: (1.0, 1.0),
            crop: (1.0, 1.0),
            scale: (1.0, 1.0),
            resize: None,
            occluders: (0, 0),
            occluder_size: (0.0, 0.0),
            hflip: 0.0,
            vflip: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        if !ordered(self.brightness) || !ordered(self.contrast) || !ordered(self.crop)
            || !ordered(self.scale)
            || !ordered(self.occluder_size)
        {
            return Err(Error::InvalidArgument("augmentation ranges must be finite with min <= max".into()));
        }
        if !(self.crop.0 > 0.0 && self.crop.1 <= 1.0) {
            return Err(Error::InvalidArgument("crop fractions must lie in (0, 1]".into()));
        }
        if self.scale.0 <= 0.0 {
            return Err(Error::InvalidArgument("scale factors must be positive".into()));
        }
        if self.contrast.0 < 0.0 || self.occluder_size.0 < 0.0 || self.occluders.0 > self.occluders.1 {
            return Err(Error::InvalidArgument("bad contrast, occluder count or size range".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip) || !(0.0..=1.0).contains(&self.vflip) {
            return Err(Error::InvalidArgument("flip probabilities must lie in [0, 1]".into()));
        }
        if let Some((w, h)) = self.resize {
            if w < 2 || h < 2 {
                return Err(Error::InvalidArgument("resize target must be at least 2x2".into()));
            }
        }
        Ok(())
    }
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            brightness: (-0.05, 0.05),
            contrast: (0.4, 1.0),
            crop: (0.7, 1.0),
            scale: (0.8, 1.25),
            resize: None,
            occluders: (0, 2),
            occluder_size: (8.0, 32.0),
            hflip: 0.5,
            vflip: 0.1,
        }
    }
}

/// Crop, resize and flip as one affine map from input to output pixels:
/// `q = (p − origin) · scale`, then mirrored when flipped.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricAug {
    pub origin: [f64; 2],
    pub scale: [f64; 2],
    pub out_size: (usize, usize),
    pub hflip: bool,
    pub vflip: bool,
}

impl GeometricAug {
    pub fn identity(width: usize, height: usize) -> Self {
        GeometricAug {
            origin: [0.0, 0.0],
            scale: [1.0, 1.0],
            out_size: (width, height),
            hflip: false,
            vflip: false,
        }
    }

    /// Crop `crop` pixels starting at `origin`, resized to `out`.
    pub fn crop_resize(origin: [usize; 2], crop: (usize, usize), out: (usize, usize), hflip: bool, vflip: bool) -> Self {
        GeometricAug {
            origin: [origin[0] as f64, origin[1] as f64],
            scale: [out.0 as f64 / crop.0 as f64, out.1 as f64 / crop.1 as f64],
            out_size: out,
            hflip,
            vflip,
        }
    }

    pub fn map_point(&self, p: [f64; 2]) -> [f64; 2] {
        let mut x = (p[0] - self.origin[0]) * self.scale[0];
        let mut y = (p[1] - self.origin[1]) * self.scale[1];
        if self.hflip {
            x = (self.out_size.0 - 1) as f64 - x;
        }
        if self.vflip {
            y = (self.out_size.1 - 1) as f64 - y;
        }
        [x, y]
    }

    pub fn unmap_point(&self, q: [f64; 2]) -> [f64; 2] {
        let x = if self.hflip { (self.out_size.0 - 1) as f64 - q[0] } else { q[0] };
        let y = if self.vflip { (self.out_size.1 - 1) as f64 - q[1] } else { q[1] };
        [x / self.scale[0] + self.origin[0], y / self.scale[1] + self.origin[1]]
    }

    fn inside(&self, q: [f64; 2]) -> bool {
        q[0] >= 0.0 && q[1] >= 0.0 && q[0] <= (self.out_size.0 - 1) as f64 && q[1] <= (self.out_size.1 - 1) as f64
    }

    /// The label in output coordinates, or `None` if its point or endpoint
    /// leaves the output frame.
    pub fn map_label(&self, l: &PointLabel) -> Option<PointLabel> {
        let p = self.map_point([l.x, l.y]);
        let q = self.map_point([l.x + l.dx, l.y + l.dy]);
        if !(self.inside(p) && self.inside(q)) {
            return None;
        }
        Some(PointLabel {
            x: p[0],
            y: p[1],
            dx: q[0] - p[0],
            dy: q[1] - p[1],
        })
    }

    /// Resamples a frame onto the output lattice.
    pub fn apply(&self, frame: &Frame) -> Frame {
        let (w, h) = self.out_size;
        let mut data = Vec::with_capacity(w * h * CHANNELS);
        for y in 0..h {
            for x in 0..w {
                let p = self.unmap_point([x as f64, y as f64]);
                let c = sample_rgb(frame, p[0], p[1]);
                data.extend(c.iter().map(|&v| (v as f32).clamp(-0.5, 0.5)));
            }
        }
        Frame::from_raw(w, h, data, frame.time_index())
    }
}

/// A frame pair from one video with its sparse labels.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub video: String,
    pub source: Frame,
    pub target: Frame,
    pub labels: Vec<PointLabel>,
}

/// Groups pair labels by `(clip, frame)` into training samples.
///
/// Labels whose clip is not among `clips` are an error.
pub fn samples_from_labels(clips: &[VideoClip], labels: &PseudoLabelSet) -> Result<Vec<TrainSample>> {
    samples_from_pair_labels(clips, &labels.pair_labels())
}

pub fn samples_from_pair_labels(clips: &[VideoClip], labels: &[FlowLabel]) -> Result<Vec<TrainSample>> {
    let mut out: Vec<TrainSample> = Vec::new();
    let mut index: std::collections::BTreeMap<(String, usize), usize> = Default::default();
    for l in labels {
        let key = (l.clip.clone(), l.frame);
        let i = match index.get(&key) {
            Some(&i) => i,
            None => {
                let clip = clips
                    .iter()
                    .find(|c| c.id == l.clip)
                    .ok_or_else(|| Error::InvalidArgument(format!("label refers to unknown clip {}", l.clip)))?;
                if l.frame + 1 >= clip.frames.len() {
                    return Err(Error::InvalidArgument(format!(
                        "label frame {} out of range for clip {}",
                        l.frame, l.clip
                    )));
                }
                out.push(TrainSample {
                    video: l.clip.clone(),
                    source: clip.frames[l.frame].clone(),
                    target: clip.frames[l.frame + 1].clone(),
                    labels: Vec::new(),
                });
                index.insert(key, out.len() - 1);
                out.len() - 1
            }
        };
        out[i].labels.push(PointLabel {
            x: l.x,
            y: l.y,
            dx: l.dx,
            dy: l.dy,
        });
    }
    let mut keyed: Vec<((String, usize), TrainSample)> = index.into_iter().map(|(k, i)| (k, out[i].clone())).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(keyed.into_iter().map(|(_, s)| s).collect())
}

/// Unlabelled consecutive pairs of each clip, for the photometric baselines.
pub fn samples_from_clips(clips: &[VideoClip], stride: usize) -> Vec<TrainSample> {
    let mut out = Vec::new();
    for c in clips {
        for t in (0..c.frames.len().saturating_sub(1)).step_by(stride.max(1)) {
            out.push(TrainSample {
                video: c.id.clone(),
                source: c.frames[t].clone(),
                target: c.frames[t + 1].clone(),
                labels: Vec::new(),
            });
        }
    }
    out
}

/// An augmented sample and the geometry that produced it.
#[derive(Debug, Clone)]
pub struct AugmentedSample {
    pub source: Frame,
    pub target: Frame,
    pub labels: Vec<PointLabel>,
    pub geometry: GeometricAug,
}

const GEOMETRY_ATTEMPTS: usize = 16;

fn draw(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.0 < r.1 {
        rng.random_range(r.0..=r.1)
    } else {
        r.0
    }
}

fn draw_geometry(spec: &AugmentationSpec, w: usize, h: usize, rng: &mut impl Rng) -> GeometricAug {
    let f = draw(rng, spec.crop);
    let cw = ((w as f64 * f).round() as usize).clamp(2, w);
    let ch = ((h as f64 * f).round() as usize).clamp(2, h);
    let ox = if cw < w { rng.random_range(0..=w - cw) } else { 0 };
    let oy = if ch < h { rng.random_range(0..=h - ch) } else { 0 };
    let s = draw(rng, spec.scale);
    let out = spec.resize.unwrap_or_else(|| {
        (
            ((cw as f64 * s).round() as usize).max(2),
            ((ch as f64 * s).round() as usize).max(2),
        )
    });
    let hflip = spec.hflip > 0.0 && rng.random_bool(spec.hflip);
    let vflip = spec.vflip > 0.0 && rng.random_bool(spec.vflip);
    GeometricAug::crop_resize([ox, oy], (cw, ch), out, hflip, vflip)
}

fn jitter(frame: &Frame, brightness: f64, contrast: f64) -> Frame {
    if brightness == 0.0 && contrast == 1.0 {
        return frame.clone();
    }
    let mean = frame.mean_color();
    let mut out = frame.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let m = mean[i % CHANNELS] as f64;
        *v = (((*v as f64 - m) * contrast + m + brightness) as f32).clamp(-0.5, 0.5);
    }
    out
}

/// Applies a random augmentation drawn from `spec`.
///
/// Geometry is redrawn until at least one label survives; samples without
/// labels accept the first draw.
pub fn augment(sample: &TrainSample, spec: &AugmentationSpec, rng: &RngStream) -> Result<AugmentedSample> {
    spec.validate()?;
    let mut r = rng.rng();
    let (w, h) = sample.source.dims();
    let mut chosen = None;
    for _ in 0..GEOMETRY_ATTEMPTS {
        let g = draw_geometry(spec, w, h, &mut r);
        let labels: Vec<PointLabel> = sample.labels.iter().filter_map(|l| g.map_label(l)).collect();
        if sample.labels.is_empty() || !labels.is_empty() {
            chosen = Some((g, labels));
            break;
        }
    }
    let (geometry, labels) = chosen.ok_or(Error::Unmappable)?;
    let b = draw(&mut r, spec.brightness);
    let c = draw(&mut r, spec.contrast);
    let source = jitter(&geometry.apply(&sample.source), b, c);
    let mut target = jitter(&geometry.apply(&sample.target), b, c);
    let n = if spec.occluders.0 < spec.occluders.1 {
        r.random_range(spec.occluders.0..=spec.occluders.1)
    } else {
        spec.occluders.0
    };
    let (ow, oh) = geometry.out_size;
    for _ in 0..n {
        let sw = draw(&mut r, spec.occluder_size).round() as usize;
        let sh = draw(&mut r, spec.occluder_size).round() as usize;
        let x0 = r.random_range(0..ow);
        let y0 = r.random_range(0..oh);
        let color = [
            r.random_range(-0.5f32..=0.5),
            r.random_range(-0.5f32..=0.5),
            r.random_range(-0.5f32..=0.5),
        ];
        for y in y0..(y0 + sh).min(oh) {
            for x in x0..(x0 + sw).min(ow) {
                target.set_pixel(x, y, color);
            }
        }
    }
    Ok(AugmentedSample {
        source,
        target,
        labels,
        geometry,
    })
}

/// Sparse color-constancy loss: `Σ_{t≥1} ‖X_t[ŷ_t] − X_0[ŷ_0]‖₂` per track,
/// averaged over tracks.
pub fn color_constancy_loss_tracks(frames: &[Frame], tracks: &[Trajectory]) -> Result<f64> {
    if frames.len() != crate::types::TRACK_LEN {
        return Err(Error::InvalidArgument(format!("expected {} frames", crate::types::TRACK_LEN)));
    }
    if tracks.is_empty() {
        return Err(Error::Empty("tracks"));
    }
    let mut total = 0.0;
    for tr in tracks {
        let p0 = tr.points[0];
        let c0 = sample_rgb(&frames[0], p0[0], p0[1]);
        for t in 1..frames.len() {
            let p = tr.points[t];
            let c = sample_rgb(&frames[t], p[0], p[1]);
            total += c.iter().zip(&c0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        }
    }
    Ok(total / tracks.len() as f64)
}

/// Dense color-constancy loss: mean per-pixel RGB distance between `source`
/// and `target` warped back by `flow`.
pub fn color_constancy_loss_dense(source: &Frame, target: &Frame, flow: &FlowField) -> Result<f64> {
    crate::types::ensure_dims(source.dims(), target.dims())?;
    let warped = warp_backward(target, flow)?;
    let n = source.width() * source.height();
    let total: f64 = source
        .data()
        .chunks_exact(CHANNELS)
        .zip(warped.data().chunks_exact(CHANNELS))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

/// Default edge-awareness λ, per unit of gray gradient magnitude.
pub const EDGE_LAMBDA: f64 = 10.0;

/// Per-pixel smoothness weights: 1, or `exp(−λ‖∇I‖)` on the gray image.
fn smoothness_weights(width: usize, height: usize, edge: Option<(&Frame, f64)>) -> Vec<f64> {
    match edge {
        None => vec![1.0; width * height],
        Some((frame, lambda)) => {
            let g = frame.gray();
            (0..width * height)
                .map(|i| {
                    let (x, y) = (i % width, i / width);
                    let gx = if x + 1 < width { g.get(x + 1, y) - g.get(x, y) } else { 0.0 } as f64;
                    let gy = if y + 1 < height { g.get(x, y + 1) - g.get(x, y) } else { 0.0 } as f64;
                    let m = gx.hypot(gy);
                    if lambda.is_infinite() {
                        if m > 0.0 {
                            0.0
                        } else {
                            1.0
                        }
                    } else {
                        (-lambda * m).exp()
                    }
                })
                .collect()
        }
    }
}

/// `sqrt(u_x² + u_y² + v_x² + v_y²)` from forward differences, averaged over
/// pixels that have both forward neighbors. The edge-aware variant weights
/// each pixel by `exp(−λ‖∇I‖)` of `frame`.
pub fn smoothness_loss(flow: &FlowField, edge: Option<(&Frame, f64)>) -> Result<f64> {
    let (w, h) = flow.dims();
    if let Some((f, _)) = edge {
        crate::types::ensure_dims(f.dims(), (w, h))?;
    }
    if w < 2 || h < 2 {
        return Ok(0.0);
    }
    let wts = smoothness_weights(w, h, edge);
    let (u, v) = (flow.u(), flow.v());
    let mut total = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let i = y * w + x;
            let d = [
                u[i + 1] as f64 - u[i] as f64,
                u[i + w] as f64 - u[i] as f64,
                v[i + 1] as f64 - v[i] as f64,
                v[i + w] as f64 - v[i] as f64,
            ];
            total += wts[i] * d.iter().map(|a| a * a).sum::<f64>().sqrt();
        }
    }
    Ok(total / ((w - 1) * (h - 1)) as f64)
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    PseudoLabel,
    Color,
    ColorSmooth,
    ColorEdge,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pseudo-label" => Ok(Objective::PseudoLabel),
            "color" => Ok(Objective::Color),
            "color+smooth" => Ok(Objective::ColorSmooth),
            "color+edge" => Ok(Objective::ColorEdge),
            other => Err(Error::Unknown {
                what: "objective",
                value: other.to_string(),
            }),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::PseudoLabel => "pseudo-label",
            Objective::Color => "color",
            Objective::ColorSmooth => "color+smooth",
            Objective::ColorEdge => "color+edge",
        })
    }
}

/// How samples from several videos are consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VideoMode {
    /// One pool shuffled together.
    Single,
    /// Videos in order, each for its share of the steps.
    Multi,
}

impl FromStr for VideoMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(VideoMode::Single),
            "multi" => Ok(VideoMode::Multi),
            other => Err(Error::Unknown {
                what: "video mode",
                value: other.to_string(),
            }),
        }
    }
}

impl std::fmt::Display for VideoMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VideoMode::Single => "single",
            VideoMode::Multi => "multi",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Optimizer steps.
    pub kappa: usize,
    /// Labels drawn per micro-batch.
    pub batch_size: usize,
    /// Micro-batches averaged per step.
    pub accumulation: usize,
    /// Initial step size.
    pub lr: f64,
    /// Per-iteration discount of the sequence loss.
    pub discount: f64,
    pub augmentation: AugmentationSpec,
    pub mode: VideoMode,
    pub seed: u64,
    /// Augmented variants prepared per sample.
    pub pool: usize,
    /// Weight of the smoothness term in the color+smooth objectives.
    pub smooth_weight: f64,
    pub edge_lambda: f64,
    /// Side of the random window scored per micro-batch by the photometric
    /// objectives.
    pub patch: usize,
    /// Keep a snapshot every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kappa: 3000,
            batch_size: 64,
            accumulation: 8,
            lr: 1e-2,
            discount: 0.8,
            augmentation: AugmentationSpec::default(),
            mode: VideoMode::Multi,
            seed: 0,
            pool: 4,
            smooth_weight: 0.5,
            edge_lambda: EDGE_LAMBDA,
            patch: 32,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accumulation == 0 || self.batch_size == 0 || self.pool == 0 || self.patch < 2 {
            return Err(Error::InvalidArgument(
                "accumulation, batch size and pool must be at least 1 and patch at least 2".into(),
            ));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::InvalidArgument("discount must lie in (0, 1]".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument("step size must be finite and >= 0".into()));
        }
        self.augmentation.validate()
    }
}

/// Cosine-annealed step size at `step` of `total`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub step_size: f64,
    pub labels_seen: usize,
}

/// Renders the log as `step,loss,step_size,labels_seen` CSV.
pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,loss,step_size,labels_seen\n");
    for r in rows {
        let _ = writeln!(s, "{},{:?},{:?},{}", r.step, r.loss, r.step_size, r.labels_seen);
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ReferenceModel,
    pub log: Vec<LogRow>,
    /// `(step, snapshot)` taken after the given number of steps.
    pub checkpoints: Vec<(usize, ReferenceModel)>,
}

struct Prepared {
    video: usize,
    ctx: PairContext,
    source: Frame,
    target: Frame,
    labels: Vec<PointLabel>,
}

/// A rectangular pixel window `(x0, y0, width, height)`.
type Window = (usize, usize, usize, usize);

/// Per-iteration traces at every pixel of a window: `(estimates[k][i], features[k][i])`.
fn dense_traces(
    model: &ReferenceModel,
    ctx: &PairContext,
    win: Window,
) -> (Vec<Vec<[f64; 2]>>, Vec<Vec<[f64; FEATURES]>>) {
    let (x0, y0, w, h) = win;
    let k = model.head.steps + 1;
    let mut est = vec![Vec::with_capacity(w * h); k];
    let mut feat = vec![Vec::with_capacity(w * h); k - 1];
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let tr = model.trace(ctx, [x as f64, y as f64]);
            for (j, e) in tr.estimates.into_iter().enumerate() {
                est[j].push(e);
            }
            for (j, f) in tr.features.into_iter().enumerate() {
                feat[j].push(f);
            }
        }
    }
    (est, feat)
}

/// Loss and head gradient of the photometric objectives on one window of a
/// pair. Every iteration's field is scored with the sequence-loss weights and
/// each step's input is held constant.
fn dense_objective_gradient(
    model: &ReferenceModel,
    p: &Prepared,
    win: Window,
    objective: Objective,
    cfg: &TrainConfig,
) -> (HeadWeights, f64) {
    let (x0, y0, w, h) = win;
    let (est, feat) = dense_traces(model, &p.ctx, win);
    let n = est.len();
    let npx = (w * h) as f64;
    let smooth = matches!(objective, Objective::ColorSmooth | Objective::ColorEdge);
    let wts = if smooth {
        let (fw, fh) = p.ctx.dims();
        let edge = (objective == Objective::ColorEdge).then_some((&p.source, cfg.edge_lambda));
        let full = smoothness_weights(fw, fh, edge);
        (0..w * h).map(|i| full[(y0 + i / w) * fw + x0 + i % w]).collect()
    } else {
        Vec::new()
    };
    let mut grad = [[0.0; FEATURES]; 2];
    let mut loss = 0.0;
    let mut dfield = vec![[0.0f64; 2]; w * h];
    for (k, field) in est.iter().enumerate() {
        let wk = iteration_weight(k, n, cfg.discount);
        dfield.iter_mut().for_each(|d| *d = [0.0, 0.0]);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (px, py) = (x0 + x, y0 + y);
                let f = field[i];
                let s = p.source.pixel(px, py);
                let (c, j) = sample_rgb_grad(&p.target, px as f64 + f[0], py as f64 + f[1]);
                let r: [f64; 3] = [c[0] - s[0] as f64, c[1] - s[1] as f64, c[2] - s[2] as f64];
                let norm = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                loss += wk * norm / npx;
                if norm > 0.0 {
                    for ch in 0..3 {
                        dfield[i][0] += r[ch] / norm * j[ch][0] / npx;
                        dfield[i][1] += r[ch] / norm * j[ch][1] / npx;
                    }
                }
            }
        }
        if smooth && w > 1 && h > 1 {
            let denom = ((w - 1) * (h - 1)) as f64;
            for y in 0..h - 1 {
                for x in 0..w - 1 {
                    let i = y * w + x;
                    let d = [
                        field[i + 1][0] - field[i][0],
                        field[i + w][0] - field[i][0],
                        field[i + 1][1] - field[i][1],
                        field[i + w][1] - field[i][1],
                    ];
                    let m = d.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let sw = cfg.smooth_weight * wts[i] / denom;
                    loss += wk * sw * m;
                    if m > 0.0 {
                        // d/du_i, d/du_{i+1}, d/du_{i+w}, same for v
                        dfield[i][0] -= sw * (d[0] + d[1]) / m;
                        dfield[i + 1][0] += sw * d[0] / m;
                        dfield[i + w][0] += sw * d[1] / m;
                        dfield[i][1] -= sw * (d[2] + d[3]) / m;
                        dfield[i + 1][1] += sw * d[2] / m;
                        dfield[i + w][1] += sw * d[3] / m;
                    }
                }
            }
        }
        if k == 0 {
            continue;
        }
        for (i, d) in dfield.iter().enumerate() {
            let phi = &feat[k - 1][i];
            for c in 0..2 {
                if d[c] != 0.0 {
                    for jf in 0..FEATURES {
                        grad[c][jf] += wk * d[c] * phi[jf];
                    }
                }
            }
        }
    }
    (grad, loss)
}

/// Order in which pool entries feed micro-batches.
fn micro_batch_order(pool: &[Prepared], videos: usize, total: usize, cfg: &TrainConfig, rng: &RngStream) -> Vec<usize> {
    let shuffled_cycle = |members: &[usize], count: usize, stream: RngStream| -> Vec<usize> {
        let mut r = stream.rng();
        let mut out = Vec::with_capacity(count);
        let mut deck = members.to_vec();
        while out.len() < count && !deck.is_empty() {
            deck.shuffle(&mut r);
            out.extend(deck.iter().take(count - out.len()));
        }
        out
    };
    match cfg.mode {
        VideoMode::Single => shuffled_cycle(&(0..pool.len()).collect::<Vec<_>>(), total, rng.derive("order")),
        VideoMode::Multi => {
            let steps = cfg.kappa;
            let mut out = Vec::with_capacity(total);
            for v in 0..videos {
                let members: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].video == v).collect();
                let share = steps / videos + usize::from(v < steps % videos);
                out.extend(shuffled_cycle(&members, share * cfg.accumulation, rng.derive(format!("order/{v}"))));
            }
            out
        }
    }
}

/// Fine-tunes the correction head. `samples` must carry labels for the
/// pseudo-label objective; the photometric objectives ignore labels.
pub fn finetune(
    model: &ReferenceModel,
    samples: &[TrainSample],
    objective: Objective,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut current = model.clone();
    let mut out = TrainOutput {
        model: current.clone(),
        log: Vec::new(),
        checkpoints: Vec::new(),
    };
    if cfg.kappa == 0 {
        return Ok(out);
    }
    if samples.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    let labelled = objective == Objective::PseudoLabel;
    if labelled && samples.iter().all(|s| s.labels.is_empty()) {
        return Err(Error::Empty("pseudo-labels"));
    }

    let mut video_ids: Vec<&str> = Vec::new();
    for s in samples {
        if !video_ids.contains(&s.video.as_str()) {
            video_ids.push(&s.video);
        }
    }
    let root = RngStream::new(cfg.seed, "finetune");
    let mut pool = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if labelled && s.labels.is_empty() {
            continue;
        }
        let video = video_ids.iter().position(|v| *v == s.video).unwrap_or(0);
        for j in 0..cfg.pool {
            match augment(s, &cfg.augmentation, &root.derive(format!("aug/{i}/{j}"))) {
                Ok(a) => {
                    let ctx = current.context(&a.source, &a.target)?;
                    pool.push(Prepared {
                        video,
                        ctx,
                        source: a.source,
                        target: a.target,
                        labels: a.labels,
                    });
                }
                Err(Error::Unmappable) => log::warn!("sample {i} variant {j}: no label survives augmentation"),
                Err(e) => return Err(e),
            }
        }
    }
    if pool.is_empty() {
        return Err(Error::Unmappable);
    }
    let order = micro_batch_order(&pool, video_ids.len(), cfg.kappa * cfg.accumulation, cfg, &root);
    let mut pick = root.derive("labels").rng();
    let mut seen = 0usize;
    for (step, chunk) in order.chunks(cfg.accumulation).enumerate() {
        let mut grad = [[0.0; FEATURES]; 2];
        let mut loss = 0.0;
        for &e in chunk {
            let p = &pool[e];
            let (g, l) = if labelled {
                let mut acc = GradientSum::default();
                if p.labels.len() > cfg.batch_size {
                    let idx = rand::seq::index::sample(&mut pick, p.labels.len(), cfg.batch_size);
                    let batch: Vec<PointLabel> = idx.into_iter().map(|i| p.labels[i]).collect();
                    accumulate_label_gradient(&current, &p.ctx, &batch, cfg.discount, &mut acc)?;
                } else {
                    accumulate_label_gradient(&current, &p.ctx, &p.labels, cfg.discount, &mut acc)?;
                }
                seen += acc.labels;
                acc.mean()
            } else {
                let (fw, fh) = p.ctx.dims();
                let (pw, ph) = (cfg.patch.min(fw), cfg.patch.min(fh));
                let win = (pick.random_range(0..=fw - pw), pick.random_range(0..=fh - ph), pw, ph);
                dense_objective_gradient(&current, p, win, objective, cfg)
            };
            for c in 0..2 {
                for j in 0..FEATURES {
                    grad[c][j] += g[c][j] / chunk.len() as f64;
                }
            }
            loss += l / chunk.len() as f64;
        }
        if !loss.is_finite() || grad.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        let lr = cosine_lr(cfg.lr, step, cfg.kappa);
        for c in 0..2 {
            for j in 0..FEATURES {
                current.head.weights[c][j] -= lr * grad[c][j];
            }
        }
        out.log.push(LogRow {
            step,
            loss,
            step_size: lr,
            labels_seen: seen,
        });
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            out.checkpoints.push((step + 1, current.clone()));
        }
    }
    out.model = current;
    Ok(out)
}
