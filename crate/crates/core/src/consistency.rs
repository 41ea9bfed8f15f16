//! Stage 1: turning raw forward/backward estimates into pseudo-labels.
//!
//! Flow pairs are kept where the forward and aligned backward flows cancel and
//! the colors they connect agree. Tracks are kept where the time-flipped
//! backward track, started at the forward endpoint, stays close to the forward
//! one at every step.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::index::sample;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::MotionModel;
use crate::rng::RngStream;
use crate::sampling::{align_backward_flow, residual_map};
use crate::synthgen::grid_queries;
use crate::types::{clip_to_chunks, ensure_dims, FlowField, Frame, Mask, Trajectory, VideoClip, TRACK_LEN};

/// Thresholds and sampling choices for pseudo-labelling.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    /// Relative tolerance of the flow cycle check.
    pub alpha: f64,
    /// Absolute tolerance of the flow cycle check, px².
    pub beta: f64,
    /// Color residual bound, summed over channels.
    pub gamma: f64,
    /// Track cycle bound, px².
    pub tau: f64,
    /// Frame stride between labelled pairs and between track windows.
    pub stride: usize,
    pub rebalance: bool,
    pub bins: usize,
    pub use_cycle: bool,
    pub use_color: bool,
    /// Candidate lattice spacing for flow labels, px.
    pub flow_spacing: usize,
    /// Query lattice spacing for track labels, px.
    pub track_spacing: usize,
    /// Halve the lattice spacing on clips accepting less than `densify_below`.
    pub densify: bool,
    pub densify_below: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            alpha: 0.005,
            beta: 0.25,
            gamma: 0.1,
            tau: 2.5,
            stride: 2,
            rebalance: true,
            bins: 8,
            use_cycle: true,
            use_color: true,
            flow_spacing: 2,
            track_spacing: 8,
            densify: true,
            densify_below: 0.05,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be > 0");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be >= 0");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be > 0");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if self.stride == 0 || self.bins == 0 || self.flow_spacing == 0 || self.track_spacing == 0 {
            return bad("stride, bins and spacings must be at least 1");
        }
        if !self.use_cycle && !self.use_color {
            return bad("at least one of the cycle and color filters must be enabled");
        }
        Ok(())
    }

    /// Canonical `key=value` listing, the input to [`FilterConfig::hash`].
    pub fn canonical(&self) -> String {
        format!(
            "alpha={:?}\nbeta={:?}\ngamma={:?}\ntau={:?}\nstride={}\nrebalance={}\nbins={}\n\
             use_cycle={}\nuse_color={}\nflow_spacing={}\ntrack_spacing={}\ndensify={}\ndensify_below={:?}\n",
            self.alpha,
            self.beta,
            self.gamma,
            self.tau,
            self.stride,
            self.rebalance,
            self.bins,
            self.use_cycle,
            self.use_color,
            self.flow_spacing,
            self.track_spacing,
            self.densify,
            self.densify_below
        )
    }

    /// Hex SHA-256 of [`FilterConfig::canonical`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

/// `true` where `‖w + ŵ‖² < α(‖w‖² + ‖ŵ‖² + β)`, with ŵ the backward flow
/// sampled at `p + w(p)`.
pub fn flow_cycle_mask(forward: &FlowField, backward: &FlowField, alpha: f64, beta: f64) -> Result<Mask> {
    ensure_dims(forward.dims(), backward.dims())?;
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be > 0".into()));
    }
    let aligned = align_backward_flow(forward, backward)?;
    let (w, h) = forward.dims();
    let data = (0..w * h)
        .map(|i| {
            let (fu, fv) = (forward.u()[i] as f64, forward.v()[i] as f64);
            let (bu, bv) = (aligned.u()[i] as f64, aligned.v()[i] as f64);
            let lhs = (fu + bu).powi(2) + (fv + bv).powi(2);
            lhs < alpha * (fu * fu + fv * fv + bu * bu + bv * bv + beta)
        })
        .collect();
    Ok(Mask {
        width: w,
        height: h,
        data,
    })
}

/// `true` where the flow-aligned color residual is below `gamma`.
pub fn color_mask(source: &Frame, target: &Frame, flow: &FlowField, gamma: f64) -> Result<Mask> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument("gamma must be > 0".into()));
    }
    let r = residual_map(source, target, flow)?;
    Ok(Mask {
        width: r.width,
        height: r.height,
        data: r.data.iter().map(|&v| (v as f64) < gamma).collect(),
    })
}

/// Largest squared distance between corresponding points of two tracks.
pub fn track_cycle_error(forward: &Trajectory, backward_flipped: &Trajectory) -> f64 {
    forward
        .points
        .iter()
        .zip(&backward_flipped.points)
        .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
        .fold(0.0, f64::max)
}

/// Accepts when every step stays within `tau` px² of the flipped backward track.
pub fn trajectory_cycle_mask(forward: &Trajectory, backward_flipped: &Trajectory, tau: f64) -> bool {
    track_cycle_error(forward, backward_flipped) < tau
}

/// What the labels supervise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    Flow,
    Track,
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(LabelMode::Flow),
            "track" => Ok(LabelMode::Track),
            other => Err(Error::Unknown {
                what: "label mode",
                value: other.to_string(),
            }),
        }
    }
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelMode::Flow => "flow",
            LabelMode::Track => "track",
        })
    }
}

/// An accepted flow vector at pixel `(x, y)` of frame `frame`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowLabel {
    pub clip: String,
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
}

impl FlowLabel {
    pub fn magnitude(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

/// An accepted track in the window starting at frame `window`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackLabel {
    pub clip: String,
    pub window: usize,
    pub trajectory: Trajectory,
}

/// Filter outcome for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipAcceptance {
    pub clip: String,
    pub accepted: usize,
    pub total: usize,
    pub densified: bool,
}

impl ClipAcceptance {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.accepted as f64 / self.total as f64
        }
    }
}

/// Dense acceptance mask of one labelled pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMask {
    pub clip: String,
    pub frame: usize,
    pub mask: Mask,
}

/// Filtered labels with the filter's provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub config_hash: String,
    pub mode: LabelMode,
    pub flow: Vec<FlowLabel>,
    pub tracks: Vec<TrackLabel>,
    pub accepted: usize,
    pub total: usize,
    pub clips: Vec<ClipAcceptance>,
    /// Per-pair acceptance masks (flow mode; not serialized).
    pub masks: Vec<PairMask>,
}

impl PseudoLabelSet {
    pub fn acceptance_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.accepted as f64 / self.total as f64
        }
    }

    pub fn len(&self) -> usize {
        match self.mode {
            LabelMode::Flow => self.flow.len(),
            LabelMode::Track => self.tracks.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Labels as `(clip, frame pair start, x, y, dx, dy)` steps. Tracks are
    /// split into their consecutive displacements.
    pub fn pair_labels(&self) -> Vec<FlowLabel> {
        match self.mode {
            LabelMode::Flow => self.flow.clone(),
            LabelMode::Track => {
                let mut out = Vec::new();
                for t in &self.tracks {
                    for k in 0..TRACK_LEN - 1 {
                        let (a, b) = (t.trajectory.points[k], t.trajectory.points[k + 1]);
                        out.push(FlowLabel {
                            clip: t.clip.clone(),
                            frame: t.window + k,
                            x: a[0],
                            y: a[1],
                            dx: b[0] - a[0],
                            dy: b[1] - a[1],
                        });
                    }
                }
                out
            }
        }
    }

    /// Line-oriented text: `#` header lines, then `clip,window,t,x,y,dx0,dy0,…`.
    ///
    /// Flow records carry one displacement with `window` = source frame and
    /// `t` = 0. Track records carry the query point and the offset of each of
    /// the window's points from it; track positions survive a round trip to
    /// within an ulp, and a parsed file writes back byte-identical.
    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        let _ = writeln!(s, "# motion-refine pseudo-labels v1");
        let _ = writeln!(s, "# config {}", self.config_hash);
        let _ = writeln!(s, "# mode {}", self.mode);
        let _ = writeln!(s, "# accepted {} total {}", self.accepted, self.total);
        for c in &self.clips {
            check_clip_id(&c.clip)?;
            let _ = writeln!(s, "# clip {} {} {} {}", c.clip, c.accepted, c.total, c.densified);
        }
        let _ = writeln!(s, "clip,window,t,x,y,dx0,dy0,...");
        match self.mode {
            LabelMode::Flow => {
                for l in &self.flow {
                    check_clip_id(&l.clip)?;
                    let _ = writeln!(s, "{},{},0,{:?},{:?},{:?},{:?}", l.clip, l.frame, l.x, l.y, l.dx, l.dy);
                }
            }
            LabelMode::Track => {
                for l in &self.tracks {
                    check_clip_id(&l.clip)?;
                    let tr = &l.trajectory;
                    let q = tr.query_point();
                    let _ = write!(s, "{},{},{},{:?},{:?}", l.clip, l.window, tr.query_index, q[0], q[1]);
                    for p in &tr.points {
                        let _ = write!(s, ",{:?},{:?}", p[0] - q[0], p[1] - q[1]);
                    }
                    s.push('\n');
                }
            }
        }
        Ok(s)
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        let mut header = |expect: &str| -> Result<String> {
            let (n, line) = lines
                .next()
                .ok_or_else(|| Error::parse(origin, 0, "missing header"))?;
            line.strip_prefix(expect)
                .map(str::to_string)
                .ok_or_else(|| Error::parse(origin, n + 1, format!("expected `{expect}`")))
        };
        let version = header("# motion-refine pseudo-labels ")?;
        if version != "v1" {
            return Err(Error::parse(origin, 1, format!("unsupported version {version}")));
        }
        let config_hash = header("# config ")?;
        let mode: LabelMode = header("# mode ")?.parse()?;
        let counts = header("# accepted ")?;
        let (accepted, total) = match counts.split_once(" total ") {
            Some((a, t)) => (
                a.parse().map_err(|_| Error::parse(origin, 4, "bad accepted count"))?,
                t.parse().map_err(|_| Error::parse(origin, 4, "bad total count"))?,
            ),
            None => return Err(Error::parse(origin, 4, "bad counts line")),
        };
        let mut out = PseudoLabelSet {
            config_hash,
            mode,
            flow: Vec::new(),
            tracks: Vec::new(),
            accepted,
            total,
            clips: Vec::new(),
            masks: Vec::new(),
        };
        for (n, line) in lines {
            let lineno = n + 1;
            if let Some(rest) = line.strip_prefix("# clip ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 4 {
                    return Err(Error::parse(origin, lineno, "clip line needs 4 fields"));
                }
                let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(origin, lineno, "bad count"));
                out.clips.push(ClipAcceptance {
                    clip: f[0].to_string(),
                    accepted: num(f[1])?,
                    total: num(f[2])?,
                    densified: f[3] == "true",
                });
                continue;
            }
            if line.starts_with("clip,") || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(origin, lineno, format!("bad number `{s}`")));
            let idx = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(origin, lineno, format!("bad index `{s}`")));
            match mode {
                LabelMode::Flow => {
                    if f.len() != 7 {
                        return Err(Error::parse(origin, lineno, "flow record needs 7 fields"));
                    }
                    out.flow.push(FlowLabel {
                        clip: f[0].to_string(),
                        frame: idx(f[1])?,
                        x: num(f[3])?,
                        y: num(f[4])?,
                        dx: num(f[5])?,
                        dy: num(f[6])?,
                    });
                }
                LabelMode::Track => {
                    if f.len() != 5 + 2 * TRACK_LEN {
                        return Err(Error::parse(origin, lineno, format!("track record needs {} fields", 5 + 2 * TRACK_LEN)));
                    }
                    let query_index = idx(f[2])?;
                    if query_index >= TRACK_LEN {
                        return Err(Error::parse(origin, lineno, "query index out of range"));
                    }
                    let q = [num(f[3])?, num(f[4])?];
                    let mut tr = Trajectory::stationary(q);
                    tr.query_index = query_index;
                    for k in 0..TRACK_LEN {
                        tr.points[k] = [q[0] + num(f[5 + 2 * k])?, q[1] + num(f[6 + 2 * k])?];
                    }
                    out.tracks.push(TrackLabel {
                        clip: f[0].to_string(),
                        window: idx(f[1])?,
                        trajectory: tr,
                    });
                }
            }
        }
        Ok(out)
    }
}

fn check_clip_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains([',', ' ', '\n', '\r']) {
        return Err(Error::InvalidArgument(format!("clip id `{id}` cannot be serialized")));
    }
    Ok(())
}

/// Forward and backward estimates of one pair with both filter masks.
#[derive(Debug, Clone)]
pub struct PairDecision {
    pub frame: usize,
    pub forward: FlowField,
    pub cycle: Mask,
    pub color: Mask,
}

impl PairDecision {
    /// The mask selected by the config's filter switches.
    pub fn accepted(&self, cfg: &FilterConfig) -> Mask {
        match (cfg.use_cycle, cfg.use_color) {
            (true, true) => self.cycle.and(&self.color),
            (true, false) => self.cycle.clone(),
            _ => self.color.clone(),
        }
    }
}

/// Runs the model both ways on a pair and evaluates both flow filters.
pub fn decide_pair<M: MotionModel + ?Sized>(
    model: &M,
    source: &Frame,
    target: &Frame,
    frame: usize,
    cfg: &FilterConfig,
) -> Result<PairDecision> {
    let forward = model.predict_flow(source, target)?;
    let backward = model.predict_flow(target, source)?;
    let cycle = flow_cycle_mask(&forward, &backward, cfg.alpha, cfg.beta)?;
    let color = color_mask(source, target, &forward, cfg.gamma)?;
    Ok(PairDecision {
        frame,
        forward,
        cycle,
        color,
    })
}

/// Pairs `(t, t + 1)` for `t = 0, stride, 2·stride, …`.
pub fn flow_decisions<M: MotionModel + ?Sized>(clip: &VideoClip, model: &M, cfg: &FilterConfig) -> Result<Vec<PairDecision>> {
    let n = clip.frames.len();
    (0..n.saturating_sub(1))
        .step_by(cfg.stride)
        .map(|t| {
            decide_pair(model, &clip.frames[t], &clip.frames[t + 1], t, cfg).map_err(|e| Error::WindowFailed {
                clip: clip.id.clone(),
                window: t,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Forward track and its cycle error (infinite when either pass leaves the frame).
#[derive(Debug, Clone, PartialEq)]
pub struct TrackDecision {
    pub forward: Trajectory,
    pub error: f64,
}

/// Track decisions for every window of a clip, queries on a lattice.
pub fn track_decisions<M: MotionModel + ?Sized>(
    clip: &VideoClip,
    model: &M,
    cfg: &FilterConfig,
    spacing: usize,
) -> Result<Vec<(usize, Vec<TrackDecision>)>> {
    let plan = clip_to_chunks(clip.frames.len(), cfg.stride)?;
    let Some((w, h)) = clip.dims() else {
        return Ok(Vec::new());
    };
    let queries = grid_queries(w, h, spacing);
    plan.starts
        .iter()
        .map(|&s| {
            window_track_decisions(model, &clip.frames[s..s + TRACK_LEN], &queries)
                .map(|d| (s, d))
                .map_err(|e| Error::WindowFailed {
                    clip: clip.id.clone(),
                    window: s,
                    source: Box::new(e),
                })
        })
        .collect()
}

fn window_track_decisions<M: MotionModel + ?Sized>(
    model: &M,
    window: &[Frame],
    queries: &[[f64; 2]],
) -> Result<Vec<TrackDecision>> {
    let forward = model.predict_tracks(window, queries)?;
    let reversed: Vec<Frame> = window.iter().rev().cloned().collect();
    let mut back_idx = Vec::new();
    let mut back_q = Vec::new();
    for (i, tr) in forward.iter().enumerate() {
        if tr.valid.iter().all(|&v| v) {
            back_idx.push(i);
            back_q.push(tr.points[TRACK_LEN - 1]);
        }
    }
    let backward = if back_q.is_empty() {
        Vec::new()
    } else {
        model.predict_tracks(&reversed, &back_q)?
    };
    let mut out: Vec<TrackDecision> = forward
        .into_iter()
        .map(|forward| TrackDecision {
            forward,
            error: f64::INFINITY,
        })
        .collect();
    for (i, b) in back_idx.into_iter().zip(backward) {
        if b.valid.iter().all(|&v| v) {
            out[i].error = track_cycle_error(&out[i].forward, &b.time_flipped());
        }
    }
    Ok(out)
}

fn flow_labels_from(
    clip: &str,
    decisions: &[PairDecision],
    cfg: &FilterConfig,
    spacing: usize,
    labels: &mut Vec<FlowLabel>,
    masks: &mut Vec<PairMask>,
) -> (usize, usize) {
    let (mut accepted, mut total) = (0, 0);
    for d in decisions {
        let mask = d.accepted(cfg);
        let (w, h) = mask.dims();
        for [x, y] in grid_queries(w, h, spacing) {
            let (xi, yi) = (x as usize, y as usize);
            total += 1;
            if mask.get(xi, yi) {
                accepted += 1;
                let f = d.forward.get(xi, yi);
                labels.push(FlowLabel {
                    clip: clip.to_string(),
                    frame: d.frame,
                    x,
                    y,
                    dx: f[0] as f64,
                    dy: f[1] as f64,
                });
            }
        }
        masks.push(PairMask {
            clip: clip.to_string(),
            frame: d.frame,
            mask,
        });
    }
    (accepted, total)
}

fn track_labels_from(clip: &str, decisions: &[(usize, Vec<TrackDecision>)], tau: f64, labels: &mut Vec<TrackLabel>) -> (usize, usize) {
    let (mut accepted, mut total) = (0, 0);
    for (window, ds) in decisions {
        for d in ds {
            total += 1;
            if d.error < tau {
                accepted += 1;
                labels.push(TrackLabel {
                    clip: clip.to_string(),
                    window: *window,
                    trajectory: d.forward.clone(),
                });
            }
        }
    }
    (accepted, total)
}

/// Model runs for one clip, before any threshold is applied.
#[derive(Debug, Clone)]
pub enum ClipDecisions {
    Flow(Vec<PairDecision>),
    Track {
        coarse: Vec<(usize, Vec<TrackDecision>)>,
        /// Decisions on the half-spacing lattice, used when densifying.
        fine: Option<Vec<(usize, Vec<TrackDecision>)>>,
    },
}

/// Runs the model on one clip. With `with_fine`, track mode also runs the
/// half-spacing lattice up front so any τ can be densified later.
pub fn clip_decisions<M: MotionModel + ?Sized>(
    clip: &VideoClip,
    model: &M,
    cfg: &FilterConfig,
    mode: LabelMode,
    with_fine: bool,
) -> Result<ClipDecisions> {
    Ok(match mode {
        LabelMode::Flow => ClipDecisions::Flow(flow_decisions(clip, model, cfg)?),
        LabelMode::Track => {
            let coarse = track_decisions(clip, model, cfg, cfg.track_spacing)?;
            let fine = if with_fine && cfg.track_spacing > 1 {
                Some(track_decisions(clip, model, cfg, cfg.track_spacing / 2)?)
            } else {
                None
            };
            ClipDecisions::Track { coarse, fine }
        }
    })
}

fn clip_labels<M: MotionModel + ?Sized>(
    clip: &VideoClip,
    decisions: &ClipDecisions,
    model: Option<&M>,
    cfg: &FilterConfig,
) -> Result<(ClipAcceptance, Vec<FlowLabel>, Vec<TrackLabel>, Vec<PairMask>)> {
    let (mut flow, mut tracks, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    let mut densified = false;
    let (accepted, total) = match decisions {
        ClipDecisions::Flow(ds) => {
            let (mut accepted, mut total) = flow_labels_from(&clip.id, ds, cfg, cfg.flow_spacing, &mut flow, &mut masks);
            if cfg.densify && cfg.flow_spacing > 1 && frac(accepted, total) < cfg.densify_below {
                log::info!("densifying {}: acceptance {:.4}", clip.id, frac(accepted, total));
                flow.clear();
                masks.clear();
                (accepted, total) = flow_labels_from(&clip.id, ds, cfg, cfg.flow_spacing / 2, &mut flow, &mut masks);
                densified = true;
            }
            (accepted, total)
        }
        ClipDecisions::Track { coarse, fine } => {
            let (mut accepted, mut total) = track_labels_from(&clip.id, coarse, cfg.tau, &mut tracks);
            if cfg.densify && cfg.track_spacing > 1 && frac(accepted, total) < cfg.densify_below {
                log::info!("densifying {}: acceptance {:.4}", clip.id, frac(accepted, total));
                let computed;
                let ds = match (fine, model) {
                    (Some(f), _) => f,
                    (None, Some(m)) => {
                        computed = track_decisions(clip, m, cfg, cfg.track_spacing / 2)?;
                        &computed
                    }
                    (None, None) => {
                        return Err(Error::InvalidArgument(
                            "densifying tracks needs fine decisions or a model".into(),
                        ))
                    }
                };
                tracks.clear();
                (accepted, total) = track_labels_from(&clip.id, ds, cfg.tau, &mut tracks);
                densified = true;
            }
            (accepted, total)
        }
    };
    let stats = ClipAcceptance {
        clip: clip.id.clone(),
        accepted,
        total,
        densified,
    };
    Ok((stats, flow, tracks, masks))
}

fn assemble(
    per_clip: Vec<(ClipAcceptance, Vec<FlowLabel>, Vec<TrackLabel>, Vec<PairMask>)>,
    cfg: &FilterConfig,
    mode: LabelMode,
    rng: &RngStream,
) -> Result<PseudoLabelSet> {
    let mut set = PseudoLabelSet {
        config_hash: cfg.hash(),
        mode,
        flow: Vec::new(),
        tracks: Vec::new(),
        accepted: 0,
        total: 0,
        clips: Vec::new(),
        masks: Vec::new(),
    };
    for (stats, flow, tracks, masks) in per_clip {
        set.accepted += stats.accepted;
        set.total += stats.total;
        set.clips.push(stats);
        set.flow.extend(flow);
        set.tracks.extend(tracks);
        set.masks.extend(masks);
    }
    if cfg.rebalance && !set.is_empty() {
        set = rebalance(&set, cfg.bins, rng)?;
    }
    Ok(set)
}

/// Runs the model over every clip and keeps the estimates that pass the filters.
///
/// Clips accepting less than `densify_below` are re-seeded with half the
/// lattice spacing when `densify` is on. Rebalancing, if enabled, is applied
/// last with `rng`.
pub fn generate_pseudolabels<M: MotionModel + ?Sized>(
    clips: &[VideoClip],
    model: &M,
    cfg: &FilterConfig,
    mode: LabelMode,
    rng: &RngStream,
) -> Result<PseudoLabelSet> {
    use rayon::prelude::*;
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::Empty("clips"));
    }
    let per_clip = clips
        .par_iter()
        .map(|clip| {
            let ds = clip_decisions(clip, model, cfg, mode, false)?;
            clip_labels(clip, &ds, Some(model), cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(per_clip, cfg, mode, rng)
}

/// Applies `cfg`'s thresholds to decisions computed earlier by
/// [`clip_decisions`], one entry per clip in order.
pub fn labels_from_decisions(
    clips: &[VideoClip],
    decisions: &[ClipDecisions],
    cfg: &FilterConfig,
    rng: &RngStream,
) -> Result<PseudoLabelSet> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::Empty("clips"));
    }
    if clips.len() != decisions.len() {
        return Err(Error::InvalidArgument("one decision set per clip required".into()));
    }
    let mode = match decisions[0] {
        ClipDecisions::Flow(_) => LabelMode::Flow,
        ClipDecisions::Track { .. } => LabelMode::Track,
    };
    let per_clip = clips
        .iter()
        .zip(decisions)
        .map(|(c, d)| clip_labels::<crate::models::ReferenceModel>(c, d, None, cfg))
        .collect::<Result<Vec<_>>>()?;
    assemble(per_clip, cfg, mode, rng)
}

fn frac(a: usize, t: usize) -> f64 {
    if t == 0 {
        0.0
    } else {
        a as f64 / t as f64
    }
}

/// Bin index of every magnitude over `bins` equal-width bins spanning the data.
fn magnitude_bins(mags: &[f64], bins: usize) -> Vec<usize> {
    let lo = mags.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    mags.iter()
        .map(|&m| {
            if width > 0.0 {
                (((m - lo) / width) as usize).min(bins - 1)
            } else {
                0
            }
        })
        .collect()
}

/// Indices kept after capping every magnitude bin at the median occupied-bin count.
///
/// With an even number of occupied bins the lower median is used.
pub fn rebalance_indices(mags: &[f64], bins: usize, rng: &RngStream) -> Result<Vec<usize>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be at least 1".into()));
    }
    if mags.is_empty() {
        return Err(Error::Empty("labels"));
    }
    let which = magnitude_bins(mags, bins);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for (i, &b) in which.iter().enumerate() {
        members[b].push(i);
    }
    let mut counts: Vec<usize> = members.iter().map(Vec::len).filter(|&c| c > 0).collect();
    counts.sort_unstable();
    let cap = counts[(counts.len() - 1) / 2];
    let mut keep = Vec::with_capacity(mags.len());
    for (b, m) in members.iter().enumerate() {
        if m.len() <= cap {
            keep.extend_from_slice(m);
        } else {
            let mut r = rng.derive(format!("bin{b}")).rng();
            let mut picked: Vec<usize> = sample(&mut r, m.len(), cap).into_iter().map(|j| m[j]).collect();
            picked.sort_unstable();
            keep.extend(picked);
        }
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Stratifies labels by motion magnitude and subsamples over-full bins.
///
/// Flow labels use `‖(dx, dy)‖`; tracks use their mean per-step speed.
pub fn rebalance(labels: &PseudoLabelSet, bins: usize, rng: &RngStream) -> Result<PseudoLabelSet> {
    let mut out = labels.clone();
    match labels.mode {
        LabelMode::Flow => {
            let mags: Vec<f64> = labels.flow.iter().map(FlowLabel::magnitude).collect();
            let keep = rebalance_indices(&mags, bins, rng)?;
            out.flow = keep.into_iter().map(|i| labels.flow[i].clone()).collect();
        }
        LabelMode::Track => {
            let mags: Vec<f64> = labels.tracks.iter().map(|t| t.trajectory.mean_speed()).collect();
            let keep = rebalance_indices(&mags, bins, rng)?;
            out.tracks = keep.into_iter().map(|i| labels.tracks[i].clone()).collect();
        }
    }
    Ok(out)
}
