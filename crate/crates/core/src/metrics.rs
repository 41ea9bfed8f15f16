//! Flow and tracking metrics.
//!
//! Per-sample values are summed in sorted order so dataset aggregates do not
//! depend on sample order.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::types::{ensure_dims, FlowField, Mask, Trajectory, TRACK_LEN};

/// Pixel thresholds averaged by δ and AJ.
pub const THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

/// Default survival fall-off distance, px.
pub const SURVIVAL_THRESHOLD: f64 = 16.0;
/// Alternative fall-off distance used for long-range evaluation, px.
pub const SURVIVAL_THRESHOLD_WIDE: f64 = 50.0;

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean end-point error over pixels that are valid in `valid` (all pixels if
/// `None`) and in both fields' own validity masks.
pub fn epe(pred: &FlowField, gt: &FlowField, valid: Option<&Mask>) -> Result<f64> {
    ensure_dims(gt.dims(), pred.dims())?;
    if let Some(m) = valid {
        ensure_dims(gt.dims(), m.dims())?;
    }
    let (w, h) = gt.dims();
    let mut errs = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            if valid.is_some_and(|m| !m.get(x, y)) || !gt.is_valid(x, y) || !pred.is_valid(x, y) {
                continue;
            }
            let (a, b) = (pred.get(x, y), gt.get(x, y));
            errs.push(dist([a[0] as f64, a[1] as f64], [b[0] as f64, b[1] as f64]));
        }
    }
    if errs.is_empty() {
        return Err(Error::Empty("valid flow entries"));
    }
    let n = errs.len() as f64;
    Ok(sorted_sum(errs) / n)
}

/// Mean end-point error over matched displacement lists.
pub fn epe_points(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: (gt.len(), 1),
            actual: (pred.len(), 1),
        });
    }
    if gt.is_empty() {
        return Err(Error::Empty("displacements"));
    }
    Ok(sorted_sum(pred.iter().zip(gt).map(|(a, b)| dist(*a, *b)).collect()) / gt.len() as f64)
}

/// Normalization of the per-track error sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AteNorm {
    /// Divide by the number of valid timesteps.
    #[default]
    ValidCount,
    /// Divide by the window length regardless of validity.
    Literal,
}

/// Per-timestep distances between two tracks.
pub fn track_errors(pred: &Trajectory, gt: &Trajectory) -> [f64; TRACK_LEN] {
    std::array::from_fn(|t| dist(pred.points[t], gt.points[t]))
}

/// Average track error, with validity taken from `gt`.
pub fn ate(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    ate_with(pred, gt, AteNorm::ValidCount)
}

pub fn ate_with(pred: &Trajectory, gt: &Trajectory, norm: AteNorm) -> Result<f64> {
    let n = gt.valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::Empty("valid timesteps"));
    }
    let e = track_errors(pred, gt);
    let sum: f64 = (0..TRACK_LEN).filter(|&t| gt.valid[t]).map(|t| e[t]).sum();
    Ok(match norm {
        AteNorm::ValidCount => sum / n as f64,
        AteNorm::Literal => sum / TRACK_LEN as f64,
    })
}

/// Median of per-sample errors; even counts average the middle two.
pub fn mte(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("track errors"));
    }
    let mut v = errors.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

fn check_pairs(pred: &[Trajectory], gt: &[Trajectory]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: (gt.len(), TRACK_LEN),
            actual: (pred.len(), TRACK_LEN),
        });
    }
    Ok(())
}

/// Percentage of valid timesteps within each of [`THRESHOLDS`], averaged over
/// thresholds. Timesteps from all tracks are pooled.
pub fn delta_accuracy(pred: &[Trajectory], gt: &[Trajectory]) -> Result<f64> {
    check_pairs(pred, gt)?;
    let mut errs = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        let e = track_errors(p, g);
        errs.extend((0..TRACK_LEN).filter(|&t| g.valid[t]).map(|t| e[t]));
    }
    if errs.is_empty() {
        return Err(Error::Empty("valid timesteps"));
    }
    let n = errs.len() as f64;
    let frac: f64 = THRESHOLDS
        .iter()
        .map(|&thr| errs.iter().filter(|&&e| e < thr).count() as f64 / n)
        .sum();
    Ok(100.0 * frac / THRESHOLDS.len() as f64)
}

/// `(t − 1) / 8` for the first 1-indexed timestep whose error exceeds
/// `threshold`; 1.0 if none does. Invalid timesteps are skipped.
pub fn survival_rate(pred: &Trajectory, gt: &Trajectory, threshold: f64) -> f64 {
    let e = track_errors(pred, gt);
    (0..TRACK_LEN)
        .find(|&t| gt.valid[t] && e[t] > threshold)
        .map_or(1.0, |t| t as f64 / TRACK_LEN as f64)
}

/// Mean survival rate over tracks.
pub fn mean_survival(pred: &[Trajectory], gt: &[Trajectory], threshold: f64) -> Result<f64> {
    check_pairs(pred, gt)?;
    if gt.is_empty() {
        return Err(Error::Empty("tracks"));
    }
    let rates = pred.iter().zip(gt).map(|(p, g)| survival_rate(p, g, threshold)).collect();
    Ok(sorted_sum(rates) / gt.len() as f64)
}

/// Average Jaccard in percent over valid timesteps, or `None` when no point
/// is visible in either the prediction or the ground truth.
///
/// A point that is both a false positive and a false negative (visible in
/// both but too far) counts once in the denominator, so the per-threshold
/// score is `TP / (TP + |FP ∪ FN|)`.
pub fn average_jaccard(pred: &[Trajectory], gt: &[Trajectory]) -> Result<Option<f64>> {
    check_pairs(pred, gt)?;
    let mut total = 0.0;
    for &thr in &THRESHOLDS {
        let (mut tp, mut wrong) = (0usize, 0usize);
        for (p, g) in pred.iter().zip(gt) {
            let e = track_errors(p, g);
            for t in (0..TRACK_LEN).filter(|&t| g.valid[t]) {
                let (pv, gv) = (p.visible[t], g.visible[t]);
                let close = e[t] < thr;
                if pv && gv && close {
                    tp += 1;
                } else if pv || gv {
                    wrong += 1;
                }
            }
        }
        if tp + wrong == 0 {
            return Ok(None);
        }
        total += tp as f64 / (tp + wrong) as f64;
    }
    Ok(Some(100.0 * total / THRESHOLDS.len() as f64))
}

/// Dataset-level tracking metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackMetrics {
    pub count: usize,
    pub ate: f64,
    /// Over tracks whose ground truth is visible throughout.
    pub ate_vis: Option<f64>,
    /// Over tracks occluded at some timestep.
    pub ate_occ: Option<f64>,
    pub mte: f64,
    pub delta: f64,
    pub survival: f64,
    pub aj: Option<f64>,
}

/// Evaluates matched track lists. Tracks without any valid timestep are
/// skipped.
pub fn evaluate_tracks(pred: &[Trajectory], gt: &[Trajectory], norm: AteNorm, survival_threshold: f64) -> Result<TrackMetrics> {
    check_pairs(pred, gt)?;
    let keep: Vec<usize> = (0..gt.len()).filter(|&i| gt[i].valid.iter().any(|&v| v)).collect();
    if keep.is_empty() {
        return Err(Error::Empty("tracks with valid timesteps"));
    }
    let p: Vec<Trajectory> = keep.iter().map(|&i| pred[i].clone()).collect();
    let g: Vec<Trajectory> = keep.iter().map(|&i| gt[i].clone()).collect();
    let errs: Vec<f64> = p.iter().zip(&g).map(|(a, b)| ate_with(a, b, norm)).collect::<Result<_>>()?;
    let mean_of = |sel: &dyn Fn(&Trajectory) -> bool| {
        let v: Vec<f64> = errs.iter().zip(&g).filter(|(_, t)| sel(t)).map(|(e, _)| *e).collect();
        let n = v.len();
        (n > 0).then(|| sorted_sum(v) / n as f64)
    };
    Ok(TrackMetrics {
        count: g.len(),
        ate: sorted_sum(errs.clone()) / g.len() as f64,
        ate_vis: mean_of(&|t| t.fully_visible()),
        ate_occ: mean_of(&|t| !t.fully_visible()),
        mte: mte(&errs)?,
        delta: delta_accuracy(&p, &g)?,
        survival: mean_survival(&p, &g, survival_threshold)?,
        aj: average_jaccard(&p, &g)?,
    })
}

/// A table of named rows with optional numeric cells.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl EvalReport {
    pub fn new(columns: &[&str]) -> Self {
        EvalReport {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Columns: method, ATE, ATE-Vis, ATE-Occ, MTE, δ, survival, AJ.
    pub fn for_tracks() -> Self {
        EvalReport::new(&["ate", "ate_vis", "ate_occ", "mte", "delta", "survival", "aj"])
    }

    pub fn for_flow() -> Self {
        EvalReport::new(&["epe"])
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<Option<f64>>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::ShapeMismatch {
                expected: (self.columns.len(), 1),
                actual: (values.len(), 1),
            });
        }
        self.rows.push((name.into(), values));
        Ok(())
    }

    pub fn push_tracks(&mut self, name: impl Into<String>, m: &TrackMetrics) -> Result<()> {
        self.push(
            name,
            vec![Some(m.ate), m.ate_vis, m.ate_occ, Some(m.mte), Some(m.delta), Some(m.survival), m.aj],
        )
    }

    /// CSV with a `method` column first; absent values are empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (name, vals) in &self.rows {
            s.push_str(name);
            for v in vals {
                s.push(',');
                if let Some(v) = v {
                    let _ = write!(s, "{v:?}");
                }
            }
            s.push('\n');
        }
        s
    }

    /// Fixed-width text table, two decimals, `-` for absent values.
    pub fn to_table(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(name, vals)| {
                std::iter::once(name.clone())
                    .chain(vals.iter().map(|v| v.map_or("-".to_string(), |v| format!("{v:.2}"))))
                    .collect()
            })
            .collect();
        let header: Vec<String> = std::iter::once("method".to_string()).chain(self.columns.iter().cloned()).collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| cells.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let line = |r: &[String]| {
            let mut s = String::new();
            for (i, c) in r.iter().enumerate() {
                if i == 0 {
                    let _ = write!(s, "{:<w$}", c, w = widths[0]);
                } else {
                    let _ = write!(s, "  {:>w$}", c, w = widths[i]);
                }
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = line(&header);
        for r in &cells {
            out.push_str(&line(r));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offset(g: &Trajectory, d: [f64; TRACK_LEN]) -> Trajectory {
        let mut p = g.clone();
        for t in 0..TRACK_LEN {
            p.points[t][0] += d[t];
        }
        p
    }

    #[test]
    fn epe_examples() {
        let gt = FlowField::zeros(1, 1);
        assert_eq!(epe(&gt, &gt, None).unwrap(), 0.0);
        assert_eq!(epe(&FlowField::constant(1, 1, [3.0, 4.0]), &gt, None).unwrap(), 5.0);
        assert_eq!(epe_points(&[[1.0, 0.0], [0.0, 3.0]], &[[0.0, 0.0]; 2]).unwrap(), 2.0);
        let none = Mask::filled(1, 1, false);
        assert!(matches!(epe(&gt, &gt, Some(&none)), Err(Error::Empty(_))));
    }

    #[test]
    fn ate_examples() {
        let g = Trajectory::stationary([10.0, 10.0]);
        assert_eq!(ate(&g, &g).unwrap(), 0.0);
        assert_eq!(ate(&offset(&g, [2.0; 8]), &g).unwrap(), 2.0);
        let mut half = g.clone();
        half.valid = [true, true, true, true, false, false, false, false];
        let p = offset(&g, [2.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(ate(&p, &half).unwrap(), 2.0);
        assert_eq!(ate_with(&p, &half, AteNorm::Literal).unwrap(), 1.0);
        half.valid = [false; 8];
        assert!(ate(&p, &half).is_err());
    }

    #[test]
    fn mte_examples() {
        assert_eq!(mte(&[5.0]).unwrap(), 5.0);
        assert_eq!(mte(&[1.0, 100.0, 2.0]).unwrap(), 2.0);
        assert_eq!(mte(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert!(mte(&[]).is_err());
    }

    #[test]
    fn delta_examples() {
        let g = Trajectory::stationary([0.0, 0.0]);
        assert_eq!(delta_accuracy(&[g.clone()], &[g.clone()]).unwrap(), 100.0);
        assert!((delta_accuracy(&[offset(&g, [3.0; 8])], &[g.clone()]).unwrap() - 60.0).abs() < 1e-12);
        assert_eq!(delta_accuracy(&[offset(&g, [20.0; 8])], &[g]).unwrap(), 0.0);
    }

    #[test]
    fn survival_examples() {
        let g = Trajectory::stationary([0.0, 0.0]);
        assert_eq!(survival_rate(&g, &g, SURVIVAL_THRESHOLD), 1.0);
        let mut d = [0.0; 8];
        d[4..].iter_mut().for_each(|v| *v = 40.0);
        assert_eq!(survival_rate(&offset(&g, d), &g, SURVIVAL_THRESHOLD), 0.5);
        assert_eq!(survival_rate(&offset(&g, d), &g, SURVIVAL_THRESHOLD_WIDE), 1.0);
        assert_eq!(survival_rate(&offset(&g, [40.0; 8]), &g, SURVIVAL_THRESHOLD), 0.0);
    }

    #[test]
    fn jaccard_examples() {
        let g = Trajectory::stationary([0.0, 0.0]);
        assert_eq!(average_jaccard(&[g.clone()], &[g.clone()]).unwrap(), Some(100.0));
        let mut hidden = g.clone();
        hidden.visible = [false; 8];
        assert_eq!(average_jaccard(&[g.clone()], &[hidden.clone()]).unwrap(), Some(0.0));
        assert_eq!(average_jaccard(&[hidden.clone()], &[hidden]).unwrap(), None);
        // one timestep per track: only the first is valid
        let mut a = g.clone();
        a.valid = [true, false, false, false, false, false, false, false];
        let b = a.clone();
        let b_pred = offset(&b, [3.0; 8]);
        let aj = average_jaccard(&[a.clone(), b_pred], &[a, b]).unwrap().unwrap();
        assert!((aj - 80.0).abs() < 1e-12);
    }

    #[test]
    fn report_layouts() {
        let mut r = EvalReport::for_flow();
        r.push("frozen", vec![Some(1.5)]).unwrap();
        r.push("refined", vec![None]).unwrap();
        assert_eq!(r.to_csv(), "method,epe\nfrozen,1.5\nrefined,\n");
        assert_eq!(r.to_table(), "method    epe\nfrozen   1.50\nrefined     -\n");
        assert!(r.push("bad", vec![]).is_err());
    }
}
