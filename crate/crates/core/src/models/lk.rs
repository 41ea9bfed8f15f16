//! Dense coarse-to-fine Lucas–Kanade.

use crate::error::Result;
use crate::sampling::sample_grid;
use crate::types::{ensure_dims, FlowField, Frame, Grid};

/// Largest update a single Gauss–Newton step may take, in level pixels.
const MAX_STEP: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LkConfig {
    pub levels: usize,
    /// Half-width of the square integration window.
    pub radius: usize,
    /// Gauss–Newton updates per pyramid level.
    pub iterations: usize,
    /// Minimum structure-tensor eigenvalue, normalized per window pixel.
    pub min_eigen: f64,
}

impl Default for LkConfig {
    fn default() -> Self {
        LkConfig {
            levels: 3,
            radius: 2,
            iterations: 1,
            min_eigen: 1e-6,
        }
    }
}

impl LkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.radius == 0 {
            return Err(crate::Error::InvalidArgument(
                "lk levels and radius must be at least 1".into(),
            ));
        }
        if !(self.min_eigen >= 0.0) {
            return Err(crate::Error::InvalidArgument("lk min_eigen must be >= 0".into()));
        }
        Ok(())
    }
}

/// `[1 4 6 4 1] / 16` blur followed by 2x decimation.
pub(crate) fn downsample(g: &Grid) -> Grid {
    const TAPS: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (w, h) = g.dims();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = TAPS
                .iter()
                .enumerate()
                .map(|(k, &c)| c * g.data[y * w + clamp(x as isize + k as isize - 2, w)])
                .sum();
        }
    }
    Grid::from_fn(w.div_ceil(2), h.div_ceil(2), |x, y| {
        let (sx, sy) = (2 * x, 2 * y);
        TAPS.iter()
            .enumerate()
            .map(|(k, &c)| c * tmp[clamp(sy as isize + k as isize - 2, h) * w + sx])
            .sum()
    })
}

/// Central differences, one-sided at the border.
pub(crate) fn gradients(g: &Grid) -> (Grid, Grid) {
    let (w, h) = g.dims();
    let gx = Grid::from_fn(w, h, |x, y| {
        if w < 2 {
            return 0.0;
        }
        let (a, b, d) = if x == 0 {
            (0, 1, 1.0)
        } else if x == w - 1 {
            (w - 2, w - 1, 1.0)
        } else {
            (x - 1, x + 1, 2.0)
        };
        (g.get(b, y) - g.get(a, y)) / d
    });
    let gy = Grid::from_fn(w, h, |x, y| {
        if h < 2 {
            return 0.0;
        }
        let (a, b, d) = if y == 0 {
            (0, 1, 1.0)
        } else if y == h - 1 {
            (h - 2, h - 1, 1.0)
        } else {
            (y - 1, y + 1, 2.0)
        };
        (g.get(x, b) - g.get(x, a)) / d
    });
    (gx, gy)
}

/// Sums over the clamped `(2r+1)^2` window around each pixel.
fn box_sum(values: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let iw = w + 1;
    let mut integral = vec![0f64; iw * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += values[y * w + x];
            integral[(y + 1) * iw + x + 1] = integral[y * iw + x + 1] + row;
        }
    }
    let mut out = vec![0f64; w * h];
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            out[y * w + x] = integral[y1 * iw + x1] - integral[y0 * iw + x1] - integral[y1 * iw + x0]
                + integral[y0 * iw + x0];
        }
    }
    out
}

fn window_count(x: usize, y: usize, w: usize, h: usize, r: usize) -> f64 {
    let nx = (x + r + 1).min(w) - x.saturating_sub(r);
    let ny = (y + r + 1).min(h) - y.saturating_sub(r);
    (nx * ny) as f64
}

/// Bilinear 2x upsampling of a coarse flow onto a finer lattice, scaling the vectors.
fn upsample_flow(u: &[f64], v: &[f64], cw: usize, ch: usize, fw: usize, fh: usize) -> (Vec<f64>, Vec<f64>) {
    let cu = Grid::from_vec(cw, ch, u.iter().map(|&x| x as f32).collect());
    let cv = Grid::from_vec(cw, ch, v.iter().map(|&x| x as f32).collect());
    let mut ou = Vec::with_capacity(fw * fh);
    let mut ov = Vec::with_capacity(fw * fh);
    for y in 0..fh {
        for x in 0..fw {
            let sx = x as f64 / 2.0;
            let sy = y as f64 / 2.0;
            ou.push(2.0 * sample_grid(&cu, sx, sy));
            ov.push(2.0 * sample_grid(&cv, sx, sy));
        }
    }
    (ou, ov)
}

/// Coarse-to-fine dense Lucas–Kanade on the channel-mean images.
///
/// Pixels whose structure tensor is too weak keep the flow propagated from the
/// coarser level and are flagged invalid in the output mask.
pub fn lk_flow(source: &Frame, target: &Frame, cfg: &LkConfig) -> Result<FlowField> {
    ensure_dims(source.dims(), target.dims())?;
    cfg.validate()?;
    let mut src = vec![source.gray()];
    let mut tgt = vec![target.gray()];
    for _ in 1..cfg.levels {
        let last = src.last().expect("non-empty pyramid");
        if last.width < 2 * cfg.radius + 2 || last.height < 2 * cfg.radius + 2 {
            break;
        }
        let s = downsample(last);
        let t = downsample(tgt.last().expect("non-empty pyramid"));
        src.push(s);
        tgt.push(t);
    }

    let top = src.len() - 1;
    let (mut cw, mut ch) = src[top].dims();
    let mut u = vec![0f64; cw * ch];
    let mut v = vec![0f64; cw * ch];
    let mut valid = vec![false; cw * ch];

    for level in (0..=top).rev() {
        let s = &src[level];
        let t = &tgt[level];
        let (w, h) = s.dims();
        if level != top {
            let (nu, nv) = upsample_flow(&u, &v, cw, ch, w, h);
            u = nu;
            v = nv;
        }
        cw = w;
        ch = h;
        let (gx, gy) = gradients(s);
        let n = w * h;
        let mut prod = vec![0f64; n];
        let mut tensor = |f: &dyn Fn(usize) -> f64| {
            for (i, p) in prod.iter_mut().enumerate() {
                *p = f(i);
            }
            box_sum(&prod, w, h, cfg.radius)
        };
        let axx = tensor(&|i| (gx.data[i] as f64).powi(2));
        let axy = tensor(&|i| gx.data[i] as f64 * gy.data[i] as f64);
        let ayy = tensor(&|i| (gy.data[i] as f64).powi(2));

        valid = (0..n)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                let cnt = window_count(x, y, w, h, cfg.radius);
                let tr = axx[i] + ayy[i];
                let disc = ((axx[i] - ayy[i]).powi(2) + 4.0 * axy[i] * axy[i]).sqrt();
                let lmin = 0.5 * (tr - disc) / cnt;
                let det = axx[i] * ayy[i] - axy[i] * axy[i];
                lmin >= cfg.min_eigen && lmin > 0.0 && det > 0.0
            })
            .collect();

        let r = cfg.radius as isize;
        for _ in 0..cfg.iterations {
            let mut next_u = u.clone();
            let mut next_v = v.clone();
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if !valid[i] {
                        continue;
                    }
                    let (fu, fv) = (u[i], v[i]);
                    let (mut bx, mut by) = (0.0, 0.0);
                    for yy in (y as isize - r).max(0)..(y as isize + r + 1).min(h as isize) {
                        for xx in (x as isize - r).max(0)..(x as isize + r + 1).min(w as isize) {
                            let j = yy as usize * w + xx as usize;
                            let e = sample_grid(t, xx as f64 + fu, yy as f64 + fv) - s.data[j] as f64;
                            bx += gx.data[j] as f64 * e;
                            by += gy.data[j] as f64 * e;
                        }
                    }
                    let det = axx[i] * ayy[i] - axy[i] * axy[i];
                    let mut du = -(ayy[i] * bx - axy[i] * by) / det;
                    let mut dv = -(axx[i] * by - axy[i] * bx) / det;
                    let step = du.hypot(dv);
                    if !step.is_finite() {
                        continue;
                    }
                    if step > MAX_STEP {
                        du *= MAX_STEP / step;
                        dv *= MAX_STEP / step;
                    }
                    next_u[i] = fu + du;
                    next_v[i] = fv + dv;
                }
            }
            u = next_u;
            v = next_v;
        }
    }

    let (w, h) = source.dims();
    let flow = FlowField::from_planes(
        w,
        h,
        u.iter().map(|&x| x as f32).collect(),
        v.iter().map(|&x| x as f32).collect(),
    )?;
    Ok(flow.with_valid(valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::synthgen::{Texture, TextureParams};

    fn textured(dx: f64) -> Frame {
        let mut rng = RngStream::new(11, "lk-tex").rng();
        let tex = Texture::random(&TextureParams::default(), &mut rng);
        Frame::from_fn(64, 48, 0, |x, y| {
            let c = tex.color(x as f64 - dx, y as f64);
            [c[0] as f32, c[1] as f32, c[2] as f32]
        })
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let f = textured(0.0);
        let flow = lk_flow(&f, &f, &LkConfig::default()).unwrap();
        assert!(flow.u().iter().chain(flow.v()).all(|&x| x == 0.0));
    }

    #[test]
    fn recovers_a_three_pixel_shift() {
        let a = textured(0.0);
        let b = textured(3.0);
        let flow = lk_flow(&a, &b, &LkConfig::default()).unwrap();
        let mut errs = Vec::new();
        for y in 8..40 {
            for x in 8..56 {
                let d = flow.get(x, y);
                errs.push(((d[0] - 3.0).powi(2) + d[1].powi(2)).sqrt());
            }
        }
        errs.sort_by(f32::total_cmp);
        let median = errs[errs.len() / 2];
        let p95 = errs[errs.len() * 95 / 100];
        assert!(median < 0.15 && p95 < 0.5, "median {median} p95 {p95}");
    }

    #[test]
    fn constant_frames_are_all_invalid() {
        let f = Frame::filled(32, 24, [0.1, -0.2, 0.0]);
        let flow = lk_flow(&f, &f, &LkConfig::default()).unwrap();
        assert!(flow.valid().unwrap().iter().all(|&v| !v));
    }

    #[test]
    fn box_sum_matches_naive() {
        let (w, h, r) = (7, 5, 2);
        let vals: Vec<f64> = (0..w * h).map(|i| (i * 7 % 11) as f64).collect();
        let fast = box_sum(&vals, w, h, r);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                    for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                        s += vals[yy * w + xx];
                    }
                }
                assert_eq!(fast[y * w + x], s);
            }
        }
    }
}
