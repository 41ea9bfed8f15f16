//! Motion estimators.
//!
//! [`MotionModel`] is the contract every stage is written against: dense two-frame
//! flow and sparse [`TRACK_LEN`]-frame tracks, with every refinement iteration
//! exposed. [`ReferenceModel`] implements it as a frozen pyramidal
//! Lucas–Kanade base followed by a small trainable correction head applied
//! `steps` times:
//!
//! ```text
//! f_{k+1}(p) = f_k(p) + W · φ(p, f_k(p)),   φ = [Ix, Iy, It(f), fx, fy, 1]
//! ```

mod lk;

pub use lk::{lk_flow, LkConfig};

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::loss::{iteration_weight, l1};
use crate::sampling::{sample_flow, sample_grid};
use crate::types::{ensure_dims, FlowField, Frame, Grid, Trajectory, TRACK_LEN};

/// Length of the head feature vector.
pub const FEATURES: usize = 6;

/// Head weights: one row per flow component.
pub type HeadWeights = [[f64; FEATURES]; 2];

/// Dense or sparse operating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelMode {
    DenseFlow,
    SparseTrack,
}

/// An iterative motion estimator.
pub trait MotionModel: Sync {
    /// Number of estimates returned per call (the last one is final).
    fn iterations(&self) -> usize;

    /// Per-iteration dense flows from `source` to `target`.
    fn estimate_flow(&self, source: &Frame, target: &Frame) -> Result<Vec<FlowField>>;

    fn predict_flow(&self, source: &Frame, target: &Frame) -> Result<FlowField> {
        let mut all = self.estimate_flow(source, target)?;
        all.pop().ok_or(Error::Empty("model iterations"))
    }

    /// Per-iteration tracks for queries given in `frames[0]`. The outer vector
    /// is indexed by iteration, the inner by query.
    ///
    /// The default chains final dense flows frame to frame.
    fn estimate_tracks(&self, frames: &[Frame], queries: &[[f64; 2]]) -> Result<Vec<Vec<Trajectory>>> {
        check_track_input(frames, queries)?;
        let flows = frames
            .windows(2)
            .map(|w| self.predict_flow(&w[0], &w[1]))
            .collect::<Result<Vec<_>>>()?;
        let (w, h) = frames[0].dims();
        let tracks = queries
            .iter()
            .map(|&q| {
                chain_track(q, w, h, |t, p| {
                    let d = sample_flow(&flows[t], p[0], p[1]);
                    (d, nearest_valid(&flows[t], p))
                })
            })
            .collect();
        Ok(vec![tracks])
    }

    fn predict_tracks(&self, frames: &[Frame], queries: &[[f64; 2]]) -> Result<Vec<Trajectory>> {
        let mut all = self.estimate_tracks(frames, queries)?;
        all.pop().ok_or(Error::Empty("model iterations"))
    }
}

pub(crate) fn check_track_input(frames: &[Frame], queries: &[[f64; 2]]) -> Result<()> {
    if frames.len() != TRACK_LEN {
        return Err(Error::InvalidArgument(format!(
            "track window needs {TRACK_LEN} frames, got {}",
            frames.len()
        )));
    }
    let (w, h) = frames[0].dims();
    for f in frames {
        ensure_dims((w, h), f.dims())?;
    }
    for &[x, y] in queries {
        if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
            return Err(Error::QueryOutOfBounds {
                x,
                y,
                width: w,
                height: h,
            });
        }
    }
    Ok(())
}

pub(crate) fn in_bounds(p: [f64; 2], w: usize, h: usize) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] <= (h - 1) as f64
}

fn nearest_valid(flow: &FlowField, p: [f64; 2]) -> bool {
    let x = p[0].round().clamp(0.0, (flow.width() - 1) as f64) as usize;
    let y = p[1].round().clamp(0.0, (flow.height() - 1) as f64) as usize;
    flow.is_valid(x, y)
}

/// Chains per-step displacements from `q`; `step(t, p)` returns the displacement
/// from frame `t` at `p` and whether the estimate there is trusted.
fn chain_track(q: [f64; 2], w: usize, h: usize, mut step: impl FnMut(usize, [f64; 2]) -> ([f64; 2], bool)) -> Trajectory {
    let mut tr = Trajectory::stationary(q);
    let mut p = q;
    let mut trusted = true;
    for t in 0..TRACK_LEN - 1 {
        let (d, ok) = step(t, p);
        trusted &= ok;
        p = [p[0] + d[0], p[1] + d[1]];
        let inside = in_bounds(p, w, h);
        tr.points[t + 1] = p;
        tr.valid[t + 1] = inside;
        tr.visible[t + 1] = inside && trusted;
    }
    tr
}

/// The trainable correction head.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionHead {
    pub weights: HeadWeights,
    /// Number of correction steps applied after the base estimate.
    pub steps: usize,
}

impl CorrectionHead {
    pub fn zero(steps: usize) -> Self {
        CorrectionHead {
            weights: [[0.0; FEATURES]; 2],
            steps,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().flatten().all(|w| w.is_finite())
    }

    #[inline]
    fn apply(&self, phi: &[f64; FEATURES]) -> [f64; 2] {
        let mut d = [0.0; 2];
        for (c, row) in self.weights.iter().enumerate() {
            d[c] = row.iter().zip(phi).map(|(w, f)| w * f).sum();
        }
        d
    }
}

/// Everything the head needs about one frame pair, computed once.
#[derive(Debug, Clone)]
pub struct PairContext {
    gray_source: Grid,
    gray_target: Grid,
    grad_x: Grid,
    grad_y: Grid,
    base: FlowField,
}

impl PairContext {
    pub fn new(source: &Frame, target: &Frame, lk: &LkConfig) -> Result<Self> {
        let base = lk_flow(source, target, lk)?;
        Ok(Self::with_base(source, target, base))
    }

    /// Builds a context around an externally supplied base flow.
    pub fn with_base(source: &Frame, target: &Frame, base: FlowField) -> Self {
        let gray_source = source.gray();
        let (grad_x, grad_y) = lk::gradients(&gray_source);
        PairContext {
            gray_target: target.gray(),
            gray_source,
            grad_x,
            grad_y,
            base,
        }
    }

    pub fn base(&self) -> &FlowField {
        &self.base
    }

    pub fn dims(&self) -> (usize, usize) {
        self.base.dims()
    }

    /// `φ(p, f) = [Ix, Iy, It(f), fx, fy, 1]` on the channel-mean images.
    #[inline]
    pub fn features(&self, p: [f64; 2], f: [f64; 2]) -> [f64; FEATURES] {
        let ix = sample_grid(&self.grad_x, p[0], p[1]);
        let iy = sample_grid(&self.grad_y, p[0], p[1]);
        let it = sample_grid(&self.gray_target, p[0] + f[0], p[1] + f[1])
            - sample_grid(&self.gray_source, p[0], p[1]);
        [ix, iy, it, f[0], f[1], 1.0]
    }

    /// Base flow at a sub-pixel point.
    #[inline]
    pub fn base_at(&self, p: [f64; 2]) -> [f64; 2] {
        sample_flow(&self.base, p[0], p[1])
    }

    pub(crate) fn base_valid_near(&self, p: [f64; 2]) -> bool {
        nearest_valid(&self.base, p)
    }
}

/// Estimates at one point: `estimates[k]` for `k = 0..=steps` and the features
/// each correction step consumed (`features[k]` produced `estimates[k + 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct PointTrace {
    pub estimates: Vec<[f64; 2]>,
    pub features: Vec<[f64; FEATURES]>,
}

/// Lucas–Kanade base plus correction head.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    pub lk: LkConfig,
    pub head: CorrectionHead,
}

impl Default for ReferenceModel {
    fn default() -> Self {
        ReferenceModel {
            lk: LkConfig::default(),
            head: CorrectionHead::zero(3),
        }
    }
}

impl ReferenceModel {
    pub fn context(&self, source: &Frame, target: &Frame) -> Result<PairContext> {
        PairContext::new(source, target, &self.lk)
    }

    pub fn trace(&self, ctx: &PairContext, p: [f64; 2]) -> PointTrace {
        let f0 = ctx.base_at(p);
        self.trace_from(ctx, p, f0)
    }

    fn trace_from(&self, ctx: &PairContext, p: [f64; 2], f0: [f64; 2]) -> PointTrace {
        let mut estimates = Vec::with_capacity(self.head.steps + 1);
        let mut features = Vec::with_capacity(self.head.steps);
        let mut f = f0;
        estimates.push(f);
        for _ in 0..self.head.steps {
            let phi = ctx.features(p, f);
            let d = self.head.apply(&phi);
            f = [f[0] + d[0], f[1] + d[1]];
            features.push(phi);
            estimates.push(f);
        }
        PointTrace { estimates, features }
    }

    /// Per-iteration dense flows for a prepared pair.
    pub fn flow_iterations(&self, ctx: &PairContext) -> Vec<FlowField> {
        let (w, h) = ctx.dims();
        let k = self.head.steps + 1;
        let mut u = vec![vec![0f32; w * h]; k];
        let mut v = vec![vec![0f32; w * h]; k];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let f0 = ctx.base.get(x, y);
                let tr = self.trace_from(ctx, [x as f64, y as f64], [f0[0] as f64, f0[1] as f64]);
                for (j, e) in tr.estimates.iter().enumerate() {
                    u[j][i] = e[0] as f32;
                    v[j][i] = e[1] as f32;
                }
            }
        }
        let valid = ctx.base.valid().map(|m| m.to_vec());
        u.into_iter()
            .zip(v)
            .map(|(u, v)| {
                let f = FlowField::from_planes(w, h, u, v)
                    .unwrap_or_else(|_| FlowField::zeros(w, h));
                match &valid {
                    Some(m) => f.with_valid(m.clone()),
                    None => f,
                }
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MODEL_HEADER}");
        let _ = writeln!(s, "lk.levels={}", self.lk.levels);
        let _ = writeln!(s, "lk.radius={}", self.lk.radius);
        let _ = writeln!(s, "lk.iterations={}", self.lk.iterations);
        let _ = writeln!(s, "lk.min_eigen={:?}", self.lk.min_eigen);
        let _ = writeln!(s, "head.steps={}", self.head.steps);
        let w: Vec<String> = self.head.weights.iter().flatten().map(|x| format!("{x:?}")).collect();
        let _ = writeln!(s, "head.weights={}", w.join(" "));
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MODEL_HEADER => {}
            _ => return Err(Error::parse(origin, 1, format!("expected `{MODEL_HEADER}`"))),
        }
        let mut model = ReferenceModel::default();
        let mut weights_seen = false;
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, i + 1, "expected key=value"))?;
            let bad = |m: String| Error::parse(origin, i + 1, m);
            match k {
                "lk.levels" => model.lk.levels = v.parse().map_err(|e| bad(format!("{e}")))?,
                "lk.radius" => model.lk.radius = v.parse().map_err(|e| bad(format!("{e}")))?,
                "lk.iterations" => model.lk.iterations = v.parse().map_err(|e| bad(format!("{e}")))?,
                "lk.min_eigen" => model.lk.min_eigen = v.parse().map_err(|e| bad(format!("{e}")))?,
                "head.steps" => model.head.steps = v.parse().map_err(|e| bad(format!("{e}")))?,
                "head.weights" => {
                    let vals = v
                        .split_whitespace()
                        .map(|x| x.parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| bad(format!("{e}")))?;
                    if vals.len() != 2 * FEATURES {
                        return Err(bad(format!("expected {} weights, got {}", 2 * FEATURES, vals.len())));
                    }
                    for (j, x) in vals.into_iter().enumerate() {
                        model.head.weights[j / FEATURES][j % FEATURES] = x;
                    }
                    weights_seen = true;
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        if !weights_seen {
            return Err(Error::parse(origin, 0, "missing head.weights"));
        }
        if !model.head.is_finite() {
            return Err(Error::parse(origin, 0, "non-finite head weights"));
        }
        model.lk.validate()?;
        Ok(model)
    }
}

const MODEL_HEADER: &str = "motion-refine-model v1";

impl MotionModel for ReferenceModel {
    fn iterations(&self) -> usize {
        self.head.steps + 1
    }

    fn estimate_flow(&self, source: &Frame, target: &Frame) -> Result<Vec<FlowField>> {
        let ctx = self.context(source, target)?;
        Ok(self.flow_iterations(&ctx))
    }

    fn estimate_tracks(&self, frames: &[Frame], queries: &[[f64; 2]]) -> Result<Vec<Vec<Trajectory>>> {
        check_track_input(frames, queries)?;
        let ctxs = frames
            .windows(2)
            .map(|w| self.context(&w[0], &w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.tracks_from_contexts(&ctxs, queries))
    }
}

impl ReferenceModel {
    /// Tracks for queries in the first frame of a window whose pair contexts
    /// are already prepared. One chain per iteration.
    pub fn tracks_from_contexts(&self, ctxs: &[PairContext], queries: &[[f64; 2]]) -> Vec<Vec<Trajectory>> {
        let (w, h) = ctxs[0].dims();
        (0..self.iterations())
            .map(|k| {
                queries
                    .iter()
                    .map(|&q| {
                        chain_track(q, w, h, |t, p| {
                            let tr = self.trace(&ctxs[t], p);
                            (tr.estimates[k], ctxs[t].base_valid_near(p))
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

/// One sparse regression target: displacement `(dx, dy)` at `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointLabel {
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
}

/// A frame pair with its sparse labels.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub source: Frame,
    pub target: Frame,
    pub labels: Vec<PointLabel>,
}

/// Summed head gradient and loss over a number of labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSum {
    pub gradient: HeadWeights,
    pub loss: f64,
    pub labels: usize,
}

impl GradientSum {
    pub fn merge(&mut self, other: &GradientSum) {
        for c in 0..2 {
            for j in 0..FEATURES {
                self.gradient[c][j] += other.gradient[c][j];
            }
        }
        self.loss += other.loss;
        self.labels += other.labels;
    }

    /// Mean gradient and loss per label.
    pub fn mean(&self) -> (HeadWeights, f64) {
        let n = self.labels.max(1) as f64;
        let mut g = self.gradient;
        g.iter_mut().flatten().for_each(|x| *x /= n);
        (g, self.loss / n)
    }
}

/// Accumulates the sequence-loss gradient of `labels` on one prepared pair.
///
/// Each correction step's input estimate is held constant, so the gradient of
/// step `k` is `weight_k · sign(f_k − label) ⊗ φ(f_{k−1})`.
pub fn accumulate_label_gradient(
    model: &ReferenceModel,
    ctx: &PairContext,
    labels: &[PointLabel],
    discount: f64,
    acc: &mut GradientSum,
) -> Result<()> {
    let (w, h) = ctx.dims();
    for lab in labels {
        let p = [lab.x, lab.y];
        if !in_bounds(p, w, h) {
            return Err(Error::QueryOutOfBounds {
                x: lab.x,
                y: lab.y,
                width: w,
                height: h,
            });
        }
        let target = [lab.dx, lab.dy];
        let tr = model.trace(ctx, p);
        let n = tr.estimates.len();
        for (k, e) in tr.estimates.iter().enumerate() {
            let wk = iteration_weight(k, n, discount);
            acc.loss += wk * l1(*e, target);
            if k == 0 {
                continue;
            }
            let phi = &tr.features[k - 1];
            for c in 0..2 {
                let s = sign(e[c] - target[c]);
                if s != 0.0 {
                    for j in 0..FEATURES {
                        acc.gradient[c][j] += wk * s * phi[j];
                    }
                }
            }
        }
        acc.labels += 1;
    }
    Ok(())
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean gradient of the discounted L1 sequence loss with respect to the head
/// weights, over every label in the batch. Returns `(gradient, mean loss)`.
pub fn head_gradient(model: &ReferenceModel, batch: &[TrainPair], discount: f64) -> Result<(HeadWeights, f64)> {
    let mut acc = GradientSum::default();
    for pair in batch {
        let ctx = model.context(&pair.source, &pair.target)?;
        accumulate_label_gradient(model, &ctx, &pair.labels, discount, &mut acc)?;
    }
    if acc.labels == 0 {
        return Err(Error::Empty("gradient batch"));
    }
    Ok(acc.mean())
}
