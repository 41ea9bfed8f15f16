//! Domain values shared by every stage: frames, scalar grids, flow fields and
//! fixed-length point tracks.
//!
//! Coordinates are `(x right, y down)` with the origin at the center of pixel
//! `(0, 0)`. Colors live in `[-0.5, 0.5]`.

use crate::error::{Error, Result};

/// Number of timesteps in every trajectory window.
pub const TRACK_LEN: usize = 8;

/// Color channels per frame (RGB).
pub const CHANNELS: usize = 3;

pub const COLOR_MIN: f32 = -0.5;
pub const COLOR_MAX: f32 = 0.5;

/// Convert an 8-bit channel value into the normalized color range.
pub fn color_from_u8(v: u8) -> f32 {
    v as f32 / 255.0 - 0.5
}

/// A normalized RGB frame, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f32>,
    time_index: usize,
}

/// An invariant violated by a [`Frame`].
#[derive(Debug, Clone, PartialEq)]
pub enum FrameViolation {
    LengthMismatch { expected: usize, actual: usize },
    OutOfRange { index: usize, value: f32 },
    NonFinite { index: usize },
    EmptyDimensions,
}

impl std::fmt::Display for FrameViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FrameViolation::LengthMismatch { expected, actual } => {
                write!(f, "length mismatch: expected {expected}, got {actual}")
            }
            FrameViolation::OutOfRange { index, value } => {
                write!(f, "value out of [-0.5,0.5]: {value} at {index}")
            }
            FrameViolation::NonFinite { index } => write!(f, "non-finite value at {index}"),
            FrameViolation::EmptyDimensions => write!(f, "zero width or height"),
        }
    }
}

impl Frame {
    /// Wraps raw data without checking it. Use [`validate_frame`] to audit.
    pub fn from_raw(width: usize, height: usize, data: Vec<f32>, time_index: usize) -> Self {
        Frame {
            width,
            height,
            data,
            time_index,
        }
    }

    /// Builds a frame and rejects it if any invariant is violated.
    pub fn new(width: usize, height: usize, data: Vec<f32>, time_index: usize) -> Result<Self> {
        let frame = Frame::from_raw(width, height, data, time_index);
        let violations = validate_frame(&frame);
        if violations.is_empty() {
            Ok(frame)
        } else {
            Err(Error::InvalidArgument(format!(
                "frame violates invariants: {}",
                violations
                    .iter()
                    .take(3)
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; ")
            )))
        }
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Frame::from_raw(width, height, data, 0)
    }

    /// Builds a frame from a per-pixel color function. Values are clamped into range.
    pub fn from_fn(
        width: usize,
        height: usize,
        time_index: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                let c = f(x, y);
                data.extend(c.iter().map(|v| v.clamp(COLOR_MIN, COLOR_MAX)));
            }
        }
        Frame::from_raw(width, height, data, time_index)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }

    pub fn with_time_index(mut self, t: usize) -> Self {
        self.time_index = t;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Unweighted channel mean.
    pub fn gray(&self) -> Grid {
        let data = self
            .data
            .chunks_exact(CHANNELS)
            .map(|p| ((p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0) as f32)
            .collect();
        Grid::from_vec(self.width, self.height, data)
    }

    /// Clamps every value into `[-0.5, 0.5]`; NaN becomes 0.
    pub fn clamp_colors(&mut self) {
        for v in &mut self.data {
            *v = if v.is_nan() {
                0.0
            } else {
                v.clamp(COLOR_MIN, COLOR_MAX)
            };
        }
    }

    pub fn mean_color(&self) -> [f32; 3] {
        let mut acc = [0f64; 3];
        for p in self.data.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                acc[c] += p[c] as f64;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        [
            (acc[0] / n) as f32,
            (acc[1] / n) as f32,
            (acc[2] / n) as f32,
        ]
    }
}

/// Reports every violated frame invariant; an empty list means the frame is valid.
pub fn validate_frame(frame: &Frame) -> Vec<FrameViolation> {
    let mut out = Vec::new();
    if frame.width == 0 || frame.height == 0 {
        out.push(FrameViolation::EmptyDimensions);
    }
    let expected = frame.width * frame.height * CHANNELS;
    if frame.data.len() != expected {
        out.push(FrameViolation::LengthMismatch {
            expected,
            actual: frame.data.len(),
        });
    }
    for (index, &value) in frame.data.iter().enumerate() {
        if !value.is_finite() {
            out.push(FrameViolation::NonFinite { index });
        } else if !(COLOR_MIN..=COLOR_MAX).contains(&value) {
            out.push(FrameViolation::OutOfRange { index, value });
        }
    }
    out
}

/// A 2-D scalar plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn zeros(width: usize, height: usize) -> Self {
        Grid {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length");
        Grid {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// A 2-D boolean plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

/// Dense per-pixel displacement map.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f32>,
    v: Vec<f32>,
    valid: Option<Vec<bool>>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
            valid: None,
        }
    }

    pub fn constant(width: usize, height: usize, d: [f32; 2]) -> Self {
        FlowField {
            width,
            height,
            u: vec![d[0]; width * height],
            v: vec![d[1]; width * height],
            valid: None,
        }
    }

    pub fn from_planes(width: usize, height: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "flow planes of length {}/{} do not match {width}x{height}",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("flow contains non-finite values".into()));
        }
        Ok(FlowField {
            width,
            height,
            u,
            v,
            valid: None,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 2]) -> Self {
        let mut u = Vec::with_capacity(width * height);
        let mut v = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let d = f(x, y);
                u.push(d[0]);
                v.push(d[1]);
            }
        }
        FlowField {
            width,
            height,
            u,
            v,
            valid: None,
        }
    }

    pub fn with_valid(mut self, valid: Vec<bool>) -> Self {
        assert_eq!(valid.len(), self.width * self.height, "valid mask length");
        self.valid = Some(valid);
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        let i = y * self.width + x;
        [self.u[i], self.v[i]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: [f32; 2]) {
        let i = y * self.width + x;
        self.u[i] = d[0];
        self.v[i] = d[1];
    }

    pub fn u(&self) -> &[f32] {
        &self.u
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn valid(&self) -> Option<&[bool]> {
        self.valid.as_deref()
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid
            .as_ref()
            .map(|m| m[y * self.width + x])
            .unwrap_or(true)
    }

    pub fn u_grid(&self) -> Grid {
        Grid::from_vec(self.width, self.height, self.u.clone())
    }

    pub fn v_grid(&self) -> Grid {
        Grid::from_vec(self.width, self.height, self.v.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    pub fn max_magnitude(&self) -> f32 {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .fold(0.0, f32::max)
    }
}

/// Checks that two planes share a shape.
pub(crate) fn ensure_dims(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, actual })
    }
}

/// A point track over one [`TRACK_LEN`]-frame window.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: [[f64; 2]; TRACK_LEN],
    /// Per-timestep data validity (ψ).
    pub valid: [bool; TRACK_LEN],
    pub visible: [bool; TRACK_LEN],
    pub query_index: usize,
}

impl Trajectory {
    /// A track that stays at `p` with every timestep valid and visible.
    pub fn stationary(p: [f64; 2]) -> Self {
        Trajectory {
            points: [p; TRACK_LEN],
            valid: [true; TRACK_LEN],
            visible: [true; TRACK_LEN],
            query_index: 0,
        }
    }

    pub fn query_point(&self) -> [f64; 2] {
        self.points[self.query_index]
    }

    /// Reverses time; the query index follows its point.
    pub fn time_flipped(&self) -> Trajectory {
        let mut out = self.clone();
        out.points.reverse();
        out.valid.reverse();
        out.visible.reverse();
        out.query_index = TRACK_LEN - 1 - self.query_index;
        out
    }

    pub fn is_well_formed(&self) -> bool {
        self.query_index < TRACK_LEN
            && self.valid[self.query_index]
            && self.points.iter().all(|p| p[0].is_finite() && p[1].is_finite())
    }

    pub fn fully_visible(&self) -> bool {
        self.visible.iter().all(|&v| v)
    }

    /// Mean per-step displacement magnitude.
    pub fn mean_speed(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .sum::<f64>()
            / (TRACK_LEN - 1) as f64
    }
}

/// Tracks sampled from one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub clip: String,
    pub width: usize,
    pub height: usize,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectorySet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// A named frame sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub frames: Vec<Frame>,
}

impl VideoClip {
    pub fn new(id: impl Into<String>, frames: Vec<Frame>) -> Self {
        VideoClip {
            id: id.into(),
            frames,
        }
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(Frame::dims)
    }
}

/// Result of splitting a clip into track windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub starts: Vec<usize>,
    /// Set when the clip is shorter than one window.
    pub too_short: bool,
}

/// Start indices of the `TRACK_LEN`-frame windows taken every `stride` frames.
pub fn clip_to_chunks(frame_count: usize, stride: usize) -> Result<ChunkPlan> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    if frame_count < TRACK_LEN {
        log::warn!("clip has {frame_count} frames, fewer than one {TRACK_LEN}-frame window");
        return Ok(ChunkPlan {
            starts: Vec::new(),
            too_short: true,
        });
    }
    Ok(ChunkPlan {
        starts: (0..=frame_count - TRACK_LEN).step_by(stride).collect(),
        too_short: false,
    })
}
