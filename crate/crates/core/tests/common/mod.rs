//! Shared reference implementations and fixtures for the integration tests.
#![allow(dead_code)]

use motion_refine::rng::RngStream;
use motion_refine::synthgen::*;
use motion_refine::types::{FlowField, Mask, Trajectory, TRACK_LEN};
use rand::Rng;

pub mod naive {
    use super::*;

    pub fn epe(pred: &FlowField, gt: &FlowField, mask: &Mask) -> f64 {
        let (mut sum, mut n) = (0.0, 0.0);
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                if mask.get(x, y) {
                    let (a, b) = (pred.get(x, y), gt.get(x, y));
                    let du = a[0] as f64 - b[0] as f64;
                    let dv = a[1] as f64 - b[1] as f64;
                    sum += (du * du + dv * dv).sqrt();
                    n += 1.0;
                }
            }
        }
        sum / n
    }

    fn err(p: &Trajectory, g: &Trajectory, t: usize) -> f64 {
        let dx = p.points[t][0] - g.points[t][0];
        let dy = p.points[t][1] - g.points[t][1];
        (dx * dx + dy * dy).sqrt()
    }

    pub fn ate(p: &Trajectory, g: &Trajectory, literal: bool) -> f64 {
        let mut sum = 0.0;
        let mut psi = 0.0;
        for t in 0..TRACK_LEN {
            if g.valid[t] {
                sum += err(p, g, t);
                psi += 1.0;
            }
        }
        if literal {
            sum / 8.0
        } else {
            sum / psi
        }
    }

    pub fn median(v: &[f64]) -> f64 {
        let mut s = v.to_vec();
        // selection sort
        for i in 0..s.len() {
            let mut m = i;
            for j in i + 1..s.len() {
                if s[j] < s[m] {
                    m = j;
                }
            }
            s.swap(i, m);
        }
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        }
    }

    pub fn delta(p: &[Trajectory], g: &[Trajectory]) -> f64 {
        let mut acc = 0.0;
        for thr in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let (mut hit, mut n) = (0.0, 0.0);
            for i in 0..g.len() {
                for t in 0..TRACK_LEN {
                    if g[i].valid[t] {
                        n += 1.0;
                        if err(&p[i], &g[i], t) < thr {
                            hit += 1.0;
                        }
                    }
                }
            }
            acc += hit / n;
        }
        100.0 * acc / 5.0
    }

    pub fn survival(p: &Trajectory, g: &Trajectory, thr: f64) -> f64 {
        for t1 in 1..=TRACK_LEN {
            let t = t1 - 1;
            if g.valid[t] && err(p, g, t) > thr {
                return (t1 - 1) as f64 / 8.0;
            }
        }
        1.0
    }

    pub fn aj(p: &[Trajectory], g: &[Trajectory]) -> Option<f64> {
        let mut acc = 0.0;
        for thr in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let (mut tp, mut fp_or_fn) = (0.0, 0.0);
            for i in 0..g.len() {
                for t in 0..TRACK_LEN {
                    if !g[i].valid[t] {
                        continue;
                    }
                    let pv = p[i].visible[t];
                    let gv = g[i].visible[t];
                    let close = err(&p[i], &g[i], t) < thr;
                    let is_tp = pv && gv && close;
                    let is_fp = pv && (!gv || !close);
                    let is_fn = gv && (!pv || !close);
                    if is_tp {
                        tp += 1.0;
                    }
                    if is_fp || is_fn {
                        fp_or_fn += 1.0;
                    }
                }
            }
            if tp + fp_or_fn == 0.0 {
                return None;
            }
            acc += tp / (tp + fp_or_fn);
        }
        Some(100.0 * acc / 5.0)
    }
}

pub fn random_track(r: &mut impl Rng, scale: f64) -> Trajectory {
    let mut t = Trajectory::stationary([0.0, 0.0]);
    for k in 0..TRACK_LEN {
        t.points[k] = [r.random_range(0.0..scale), r.random_range(0.0..scale)];
        t.valid[k] = r.random_bool(0.8);
        t.visible[k] = r.random_bool(0.7);
    }
    if !t.valid.iter().any(|&v| v) {
        t.valid[r.random_range(0..TRACK_LEN)] = true;
    }
    t
}

/// Prediction near `g`: errors spread across the threshold range.
pub fn perturbed(r: &mut impl Rng, g: &Trajectory) -> Trajectory {
    let mut p = g.clone();
    for k in 0..TRACK_LEN {
        let mag = r.random_range(0.0..24.0);
        let ang = r.random_range(0.0..std::f64::consts::TAU);
        p.points[k] = [g.points[k][0] + mag * ang.cos(), g.points[k][1] + mag * ang.sin()];
        p.visible[k] = r.random_bool(0.7);
    }
    p
}

/// Bilinear lookup written out longhand, coordinates clamped to the border.
pub fn gather(plane: &[f32], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.max(0.0).min((w - 1) as f64);
    let y = y.max(0.0).min((h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let at = |xx: usize, yy: usize| plane[yy * w + xx] as f64;
    at(x0, y0) * (1.0 - fx) * (1.0 - fy) + at(x1, y0) * fx * (1.0 - fy) + at(x0, y1) * (1.0 - fx) * fy + at(x1, y1) * fx * fy
}

/// Drift- and noise-free 80×60 scene with integer motions only.
pub fn integer_scene(seed: u64, bg: [f64; 2], sprite: [f64; 2]) -> SceneSpec {
    let mut rng = RngStream::new(seed, "geometry").rng();
    let params = TextureParams::default();
    SceneSpec {
        width: 80,
        height: 60,
        background: Texture::random(&params, &mut rng),
        background_motion: bg,
        sprites: vec![Sprite {
            texture: Texture::random(&params, &mut rng),
            shape: Shape::Ellipse { rx: 12.0, ry: 9.0 },
            position: [30.0, 28.0],
            motion: AffineMotion::translating(sprite),
        }],
        drift: 0.0,
        noise: 0.0,
        seed: RngStream::new(seed, "geometry-scene"),
    }
}
