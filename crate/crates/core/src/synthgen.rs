//! Procedural video clips with exact ground-truth motion.
//!
//! A scene is a moving background plane plus a depth-ordered list of textured
//! sprites, each following a per-frame similarity transform. Every ground-truth
//! quantity (flow, occlusion, tracks) is evaluated analytically from the scene
//! description, never estimated from pixels.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::types::{FlowField, Frame, Mask, Trajectory, TrajectorySet, TRACK_LEN};

/// One sinusoidal component of a procedural texture.
#[derive(Debug, Clone, PartialEq)]
pub struct Wave {
    pub kx: f64,
    pub ky: f64,
    pub phase: f64,
    pub amplitude: [f64; 3],
}

/// Band-limited texture: a base color plus a sum of plane waves, with the
/// wave contrast modulated by a slow envelope in `[contrast_floor, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub base: [f64; 3],
    pub waves: Vec<Wave>,
    /// Low-frequency waves driving the contrast envelope (first amplitude used).
    pub envelope: Vec<Wave>,
    pub contrast_floor: f64,
}

/// Knobs for drawing random textures.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureParams {
    /// Shortest wavelength in pixels. Lucas–Kanade needs this comfortably above 2.
    pub wavelength_min: f64,
    pub wavelength_max: f64,
    pub waves: usize,
    /// Peak deviation from the base color, shared across waves.
    pub amplitude: f64,
    /// Smallest contrast multiplier of the envelope; 1 disables it.
    pub contrast_floor: f64,
    pub envelope_wavelength: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        TextureParams {
            wavelength_min: 6.0,
            wavelength_max: 24.0,
            waves: 8,
            amplitude: 0.3,
            contrast_floor: 1.0,
            envelope_wavelength: 64.0,
        }
    }
}

impl Texture {
    pub fn uniform(color: [f64; 3]) -> Self {
        Texture {
            base: color,
            waves: Vec::new(),
            envelope: Vec::new(),
            contrast_floor: 1.0,
        }
    }

    pub fn random(params: &TextureParams, rng: &mut impl Rng) -> Self {
        let base_span = (0.45 - params.amplitude).max(0.0);
        let base = [
            rng.random_range(-base_span..=base_span),
            rng.random_range(-base_span..=base_span),
            rng.random_range(-base_span..=base_span),
        ];
        let n = params.waves.max(1);
        let waves = (0..params.waves)
            .map(|_| {
                let lambda = rng.random_range(params.wavelength_min..=params.wavelength_max);
                let theta = rng.random_range(0.0..PI);
                let k = 2.0 * PI / lambda;
                let mut amplitude = [0.0; 3];
                let shared = rng.random_range(0.5..1.0);
                for a in &mut amplitude {
                    *a = params.amplitude / n as f64 * (shared + rng.random_range(-0.5f64..0.5)).clamp(0.0, 1.0);
                }
                Wave {
                    kx: k * theta.cos(),
                    ky: k * theta.sin(),
                    phase: rng.random_range(0.0..2.0 * PI),
                    amplitude,
                }
            })
            .collect();
        let envelope = if params.contrast_floor < 1.0 {
            (0..3)
                .map(|_| {
                    let theta = rng.random_range(0.0..PI);
                    let k = 2.0 * PI / (params.envelope_wavelength * rng.random_range(0.75..1.5));
                    Wave {
                        kx: k * theta.cos(),
                        ky: k * theta.sin(),
                        phase: rng.random_range(0.0..2.0 * PI),
                        amplitude: [1.0, 0.0, 0.0],
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        Texture {
            base,
            waves,
            envelope,
            contrast_floor: params.contrast_floor,
        }
    }

    #[inline]
    pub fn color(&self, u: f64, v: f64) -> [f64; 3] {
        let env = self.contrast(u, v);
        let mut c = self.base;
        for w in &self.waves {
            let s = env * (w.kx * u + w.ky * v + w.phase).sin();
            for ch in 0..3 {
                c[ch] += w.amplitude[ch] * s;
            }
        }
        c
    }

    /// Contrast multiplier at a texture coordinate.
    pub fn contrast(&self, u: f64, v: f64) -> f64 {
        if self.envelope.is_empty() {
            return 1.0;
        }
        let n = self.envelope.len() as f64;
        let s: f64 = self
            .envelope
            .iter()
            .map(|w| w.amplitude[0] * (w.kx * u + w.ky * v + w.phase).sin())
            .sum();
        let t = (0.5 + s / n.sqrt()).clamp(0.0, 1.0);
        self.contrast_floor + (1.0 - self.contrast_floor) * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Ellipse { rx: f64, ry: f64 },
    Rect { hx: f64, hy: f64 },
}

impl Shape {
    fn contains(&self, u: f64, v: f64) -> bool {
        match *self {
            Shape::Ellipse { rx, ry } => (u / rx).powi(2) + (v / ry).powi(2) <= 1.0,
            Shape::Rect { hx, hy } => u.abs() <= hx && v.abs() <= hy,
        }
    }

    fn radius(&self) -> f64 {
        match *self {
            Shape::Ellipse { rx, ry } => rx.max(ry),
            Shape::Rect { hx, hy } => hx.hypot(hy),
        }
    }
}

/// Per-frame similarity motion about the sprite center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMotion {
    /// Pixels per frame.
    pub translation: [f64; 2],
    /// Degrees per frame.
    pub rotation_deg: f64,
    /// Multiplicative scale per frame.
    pub scale: f64,
}

impl AffineMotion {
    pub fn still() -> Self {
        AffineMotion {
            translation: [0.0, 0.0],
            rotation_deg: 0.0,
            scale: 1.0,
        }
    }

    pub fn translating(d: [f64; 2]) -> Self {
        AffineMotion {
            translation: d,
            ..AffineMotion::still()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sprite {
    pub texture: Texture,
    pub shape: Shape,
    /// Center at frame 0.
    pub position: [f64; 2],
    pub motion: AffineMotion,
}

impl Sprite {
    fn pose(&self, t: f64) -> ([f64; 2], f64, f64) {
        let m = &self.motion;
        let c = [
            self.position[0] + t * m.translation[0],
            self.position[1] + t * m.translation[1],
        ];
        (c, (m.rotation_deg * t).to_radians(), m.scale.powf(t))
    }

    fn to_canvas(&self, u: [f64; 2], t: f64) -> [f64; 2] {
        let (c, th, s) = self.pose(t);
        let (sn, cs) = th.sin_cos();
        [
            c[0] + s * (cs * u[0] - sn * u[1]),
            c[1] + s * (sn * u[0] + cs * u[1]),
        ]
    }

    fn to_local(&self, p: [f64; 2], t: f64) -> [f64; 2] {
        let (c, th, s) = self.pose(t);
        let (sn, cs) = th.sin_cos();
        let dx = p[0] - c[0];
        let dy = p[1] - c[1];
        [(cs * dx + sn * dy) / s, (-sn * dx + cs * dy) / s]
    }
}

fn touches_canvas(s: &Sprite, width: usize, height: usize, t: f64) -> bool {
    let (c, _, sc) = s.pose(t);
    let r = s.shape.radius() * sc;
    let x0 = (c[0] - r).floor().max(0.0) as i64;
    let x1 = (c[0] + r).ceil().min(width as f64 - 1.0) as i64;
    let y0 = (c[1] - r).floor().max(0.0) as i64;
    let y1 = (c[1] + r).ceil().min(height as f64 - 1.0) as i64;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let u = s.to_local([x as f64, y as f64], t);
            if s.shape.contains(u[0], u[1]) {
                return true;
            }
        }
    }
    false
}

/// Full description of a synthetic clip.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background: Texture,
    /// Background pan in pixels per frame.
    pub background_motion: [f64; 2],
    /// Later sprites are nearer to the camera.
    pub sprites: Vec<Sprite>,
    /// Brightness offset added per frame (frame `t` is offset by `t * drift`).
    pub drift: f64,
    /// Standard deviation of additive per-pixel sensor noise.
    pub noise: f64,
    pub seed: RngStream,
}

/// Which surface is visible at a point: the background or a sprite index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Background,
    Sprite(usize),
}

/// Exact motion and visibility for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `flows[t]` maps frame `t` to frame `t + 1`.
    pub flows: Vec<FlowField>,
    /// `occlusion[t]` marks pixels of frame `t` that are hidden or leave the canvas at `t + 1`.
    pub occlusion: Vec<Mask>,
    pub tracks: TrajectorySet,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidScene(format!(
                "canvas {}x{} is too small",
                self.width, self.height
            )));
        }
        if !(self.drift.is_finite() && self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::InvalidScene("drift and noise must be finite, noise >= 0".into()));
        }
        for (k, s) in self.sprites.iter().enumerate() {
            let m = &s.motion;
            if !(m.scale > 0.0 && m.scale.is_finite())
                || !m.translation.iter().chain([&m.rotation_deg]).all(|v| v.is_finite())
            {
                return Err(Error::InvalidScene(format!("sprite {k} has a degenerate motion")));
            }
            for t in 0..TRACK_LEN {
                if !touches_canvas(s, self.width, self.height, t as f64) {
                    return Err(Error::InvalidScene(format!(
                        "sprite {k} is fully off-canvas at frame {t}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Topmost surface at a canvas point.
    pub fn surface_at(&self, p: [f64; 2], t: f64) -> Surface {
        for (k, s) in self.sprites.iter().enumerate().rev() {
            let u = s.to_local(p, t);
            if s.shape.contains(u[0], u[1]) {
                return Surface::Sprite(k);
            }
        }
        Surface::Background
    }

    fn to_local(&self, surface: Surface, p: [f64; 2], t: f64) -> [f64; 2] {
        match surface {
            Surface::Background => [
                p[0] - t * self.background_motion[0],
                p[1] - t * self.background_motion[1],
            ],
            Surface::Sprite(k) => self.sprites[k].to_local(p, t),
        }
    }

    fn to_canvas(&self, surface: Surface, u: [f64; 2], t: f64) -> [f64; 2] {
        match surface {
            Surface::Background => [
                u[0] + t * self.background_motion[0],
                u[1] + t * self.background_motion[1],
            ],
            Surface::Sprite(k) => self.sprites[k].to_canvas(u, t),
        }
    }

    fn texture(&self, surface: Surface) -> &Texture {
        match surface {
            Surface::Background => &self.background,
            Surface::Sprite(k) => &self.sprites[k].texture,
        }
    }

    fn in_canvas(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (self.width - 1) as f64 && p[1] <= (self.height - 1) as f64
    }

    /// Noise-free, drift-free color of the scene at a point.
    pub fn clean_color(&self, p: [f64; 2], t: f64) -> [f64; 3] {
        let s = self.surface_at(p, t);
        let u = self.to_local(s, p, t);
        self.texture(s).color(u[0], u[1])
    }

    /// Exact displacement from frame `t` to `t + 1` at `p`, and whether the
    /// point is occluded (covered by a nearer surface or off-canvas) at `t + 1`.
    pub fn motion_at(&self, p: [f64; 2], t: usize) -> ([f64; 2], bool) {
        let tf = t as f64;
        let s = self.surface_at(p, tf);
        let u = self.to_local(s, p, tf);
        let q = self.to_canvas(s, u, tf + 1.0);
        let occluded = !self.in_canvas(q) || self.surface_at(q, tf + 1.0) != s;
        ([q[0] - p[0], q[1] - p[1]], occluded)
    }

    /// Ground-truth track of the surface point under `query` at frame `start`.
    pub fn track_point(&self, start: usize, query: [f64; 2]) -> Trajectory {
        let t0 = start as f64;
        let s = self.surface_at(query, t0);
        let u = self.to_local(s, query, t0);
        let mut tr = Trajectory::stationary(query);
        for k in 0..TRACK_LEN {
            let t = t0 + k as f64;
            let p = if k == 0 { query } else { self.to_canvas(s, u, t) };
            let inside = self.in_canvas(p);
            tr.points[k] = p;
            tr.valid[k] = inside;
            tr.visible[k] = inside && self.surface_at(p, t) == s;
        }
        tr
    }
}

/// Renders the clip and evaluates its ground truth.
pub fn generate_sequence(spec: &SceneSpec) -> Result<(Vec<Frame>, GroundTruth)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = spec.seed.derive("noise").rng();
    let noise = Normal::new(0.0, spec.noise.max(0.0))
        .map_err(|e| Error::InvalidScene(e.to_string()))?;

    let mut frames = Vec::with_capacity(TRACK_LEN);
    for t in 0..TRACK_LEN {
        let offset = spec.drift * t as f64;
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let c = spec.clean_color([x as f64, y as f64], t as f64);
                for v in c {
                    let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push(((v + offset + n) as f32).clamp(-0.5, 0.5));
                }
            }
        }
        frames.push(Frame::from_raw(w, h, data, t));
    }

    let mut flows = Vec::with_capacity(TRACK_LEN - 1);
    let mut occlusion = Vec::with_capacity(TRACK_LEN - 1);
    for t in 0..TRACK_LEN - 1 {
        let mut flow = FlowField::zeros(w, h);
        let mut occ = Mask::filled(w, h, false);
        for y in 0..h {
            for x in 0..w {
                let (d, o) = spec.motion_at([x as f64, y as f64], t);
                flow.set(x, y, [d[0] as f32, d[1] as f32]);
                occ.data[y * w + x] = o;
            }
        }
        flows.push(flow);
        occlusion.push(occ);
    }

    let tracks = TrajectorySet {
        clip: spec.seed.label().to_string(),
        width: w,
        height: h,
        trajectories: default_queries(spec)
            .into_iter()
            .map(|q| spec.track_point(0, q))
            .collect(),
    };
    Ok((
        frames,
        GroundTruth {
            flows,
            occlusion,
            tracks,
        },
    ))
}

/// Grid queries every 16 px plus five interior points per visible sprite.
pub fn default_queries(spec: &SceneSpec) -> Vec<[f64; 2]> {
    let mut out = grid_queries(spec.width, spec.height, 16);
    for (k, s) in spec.sprites.iter().enumerate() {
        let r = s.shape.radius() * 0.35;
        for off in [[0.0, 0.0], [r, 0.0], [-r, 0.0], [0.0, r], [0.0, -r]] {
            let p = s.to_canvas([off[0] * 0.7, off[1] * 0.7], 0.0);
            let p = [p[0].round(), p[1].round()];
            if spec.in_canvas(p) && spec.surface_at(p, 0.0) == Surface::Sprite(k) {
                out.push(p);
            }
        }
    }
    out
}

/// Lattice of query points with the given spacing, offset by half a cell.
pub fn grid_queries(width: usize, height: usize, spacing: usize) -> Vec<[f64; 2]> {
    let spacing = spacing.max(1);
    let half = spacing / 2;
    let mut out = Vec::new();
    let mut y = half;
    while y < height {
        let mut x = half;
        while x < width {
            out.push([x as f64, y as f64]);
            x += spacing;
        }
        y += spacing;
    }
    out
}

/// Speed band of a generated clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionRegime {
    Slow,
    Medium,
    Fast,
}

impl MotionRegime {
    pub fn max_speed(self) -> f64 {
        match self {
            MotionRegime::Slow => 2.0,
            MotionRegime::Medium => 6.0,
            MotionRegime::Fast => 12.0,
        }
    }

    pub fn cycle(i: usize) -> MotionRegime {
        [MotionRegime::Slow, MotionRegime::Medium, MotionRegime::Fast][i % 3]
    }
}

/// Settings for a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub clips: usize,
    pub width: usize,
    pub height: usize,
    pub texture: TextureParams,
    pub sprites_min: usize,
    pub sprites_max: usize,
    pub noise: f64,
    pub drift_max: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            clips: 12,
            width: 192,
            height: 128,
            texture: TextureParams {
                contrast_floor: 0.3,
                ..TextureParams::default()
            },
            sprites_min: 2,
            sprites_max: 4,
            noise: 0.02,
            drift_max: 0.01,
        }
    }
}

/// A rendered clip with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub id: String,
    pub regime: MotionRegime,
    pub spec: SceneSpec,
    pub frames: Vec<Frame>,
    pub truth: GroundTruth,
}

fn random_direction(rng: &mut impl Rng, magnitude: f64) -> [f64; 2] {
    let a = rng.random_range(0.0..2.0 * PI);
    [magnitude * a.cos(), magnitude * a.sin()]
}

/// Draws a random scene in the given speed band.
pub fn random_scene(cfg: &CorpusConfig, regime: MotionRegime, seed: RngStream) -> SceneSpec {
    let mut rng = seed.derive("scene").rng();
    let vmax = regime.max_speed();
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let background = Texture::random(&cfg.texture, &mut rng);
    let bg_speed = rng.random_range(0.25..=0.6) * vmax;
    let background_motion = random_direction(&mut rng, bg_speed);
    let n = rng.random_range(cfg.sprites_min..=cfg.sprites_max.max(cfg.sprites_min));
    let mut sprites = Vec::with_capacity(n);
    while sprites.len() < n {
        let size = rng.random_range(0.12..0.25) * h;
        let shape = if rng.random_bool(0.5) {
            Shape::Ellipse {
                rx: size,
                ry: size * rng.random_range(0.6..1.0),
            }
        } else {
            Shape::Rect {
                hx: size * 0.9,
                hy: size * rng.random_range(0.5..0.9),
            }
        };
        let speed = rng.random_range(0.4..=1.0) * vmax;
        let motion = AffineMotion {
            translation: random_direction(&mut rng, speed),
            rotation_deg: rng.random_range(-2.0..2.0),
            scale: rng.random_range(0.985..1.015),
        };
        // Start so that the mid-clip position lands near the canvas center region.
        let mid = [rng.random_range(0.2 * w..0.8 * w), rng.random_range(0.2 * h..0.8 * h)];
        let half = (TRACK_LEN - 1) as f64 / 2.0;
        let position = [
            mid[0] - half * motion.translation[0],
            mid[1] - half * motion.translation[1],
        ];
        let mut tex = cfg.texture.clone();
        tex.wavelength_max = tex.wavelength_max.min(size);
        tex.wavelength_min = tex.wavelength_min.min(tex.wavelength_max);
        let sprite = Sprite {
            texture: Texture::random(&tex, &mut rng),
            shape,
            position,
            motion,
        };
        if (0..TRACK_LEN).all(|t| touches_canvas(&sprite, cfg.width, cfg.height, t as f64)) {
            sprites.push(sprite);
        }
    }
    let drift = rng.random_range(-cfg.drift_max..=cfg.drift_max);
    let spec = SceneSpec {
        width: cfg.width,
        height: cfg.height,
        background,
        background_motion,
        sprites,
        drift,
        noise: cfg.noise,
        seed,
    };
    spec
}

/// Generates `cfg.clips` clips cycling through the slow, medium and fast bands.
pub fn generate_corpus(cfg: &CorpusConfig, seed: &RngStream) -> Result<Vec<SynthClip>> {
    use rayon::prelude::*;
    (0..cfg.clips)
        .into_par_iter()
        .map(|i| {
            let regime = MotionRegime::cycle(i);
            let id = format!("clip{i:02}");
            let spec = random_scene(cfg, regime, seed.derive(&id));
            let (frames, truth) = generate_sequence(&spec)?;
            Ok(SynthClip {
                id,
                regime,
                spec,
                frames,
                truth,
            })
        })
        .collect()
}

/// Photometric perturbation applied to a whole clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftKind {
    /// Scales values about 0. Safe range `[0, 2]`.
    BrightnessScale,
    /// Gaussian blur with sigma = magnitude px. Safe range `[0, 8]`.
    Blur,
    /// Scales values about each frame's mean color. Safe range `[0, 2]`.
    Contrast,
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brightness-scale" => Ok(ShiftKind::BrightnessScale),
            "blur" => Ok(ShiftKind::Blur),
            "contrast" => Ok(ShiftKind::Contrast),
            other => Err(Error::Unknown {
                what: "domain shift kind",
                value: other.to_string(),
            }),
        }
    }
}

impl std::fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShiftKind::BrightnessScale => "brightness-scale",
            ShiftKind::Blur => "blur",
            ShiftKind::Contrast => "contrast",
        })
    }
}

impl ShiftKind {
    pub fn safe_range(self) -> (f64, f64) {
        match self {
            ShiftKind::BrightnessScale | ShiftKind::Contrast => (0.0, 2.0),
            ShiftKind::Blur => (0.0, 8.0),
        }
    }
}

/// Applies a photometric shift to every frame. Motion is untouched.
pub fn domain_shift(frames: &[Frame], kind: ShiftKind, magnitude: f64) -> Result<Vec<Frame>> {
    let (lo, hi) = kind.safe_range();
    if !(lo..=hi).contains(&magnitude) {
        return Err(Error::InvalidArgument(format!(
            "{kind} magnitude {magnitude} outside [{lo}, {hi}]"
        )));
    }
    Ok(frames.iter().map(|f| shift_frame(f, kind, magnitude)).collect())
}

fn shift_frame(frame: &Frame, kind: ShiftKind, m: f64) -> Frame {
    let mut out = frame.clone();
    match kind {
        ShiftKind::BrightnessScale => {
            if m != 1.0 {
                for v in out.data_mut() {
                    *v = ((*v as f64) * m) as f32;
                }
            }
        }
        ShiftKind::Contrast => {
            if m != 1.0 {
                let mean = frame.mean_color();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    let c = mean[i % 3] as f64;
                    *v = ((*v as f64 - c) * m + c) as f32;
                }
            }
        }
        ShiftKind::Blur => {
            if m > 0.0 {
                out = gaussian_blur(frame, m);
            }
        }
    }
    out.clamp_colors();
    out
}

fn gaussian_blur(frame: &Frame, sigma: f64) -> Frame {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (w, h) = frame.dims();
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (j, kv) in k.iter().enumerate() {
                        let o = j as i64 - r;
                        let (sx, sy) = if horizontal {
                            ((x as i64 + o).clamp(0, w as i64 - 1) as usize, y)
                        } else {
                            (x, (y as i64 + o).clamp(0, h as i64 - 1) as usize)
                        };
                        acc += kv * src[(sy * w + sx) * 3 + c] as f64;
                    }
                    dst[(y * w + x) * 3 + c] = acc as f32;
                }
            }
        }
        dst
    };
    let tmp = pass(frame.data(), true);
    let data = pass(&tmp, false);
    Frame::from_raw(w, h, data, frame.time_index())
}
