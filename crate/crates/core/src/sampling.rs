//! Sub-pixel sampling and backward warping.
//!
//! All lookups clamp the query point to the grid before interpolating, so the
//! border value is repeated outward instead of introducing zeros.

use crate::error::{Error, Result};
use crate::types::{ensure_dims, FlowField, Frame, Grid, CHANNELS};

/// Interpolation taps for one query point.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    /// Whether the query was strictly inside the grid along each axis, i.e.
    /// whether the interpolant responds to motion along that axis.
    inside_x: bool,
    inside_y: bool,
}

impl Taps {
    #[inline]
    pub(crate) fn new(width: usize, height: usize, x: f64, y: f64) -> Taps {
        let (x0, x1, wx, inside_x) = axis(width, x);
        let (y0, y1, wy, inside_y) = axis(height, y);
        Taps {
            x0,
            x1,
            y0,
            y1,
            wx,
            wy,
            inside_x,
            inside_y,
        }
    }

    #[inline]
    fn corners(&self, data: &[f32], width: usize, stride: usize, offset: usize) -> [f64; 4] {
        let at = |x: usize, y: usize| data[(y * width + x) * stride + offset] as f64;
        [
            at(self.x0, self.y0),
            at(self.x1, self.y0),
            at(self.x0, self.y1),
            at(self.x1, self.y1),
        ]
    }

    #[inline]
    pub(crate) fn sample(&self, data: &[f32], width: usize, stride: usize, offset: usize) -> f64 {
        let [v00, v10, v01, v11] = self.corners(data, width, stride, offset);
        let (wx, wy) = (self.wx, self.wy);
        (1.0 - wx) * (1.0 - wy) * v00 + wx * (1.0 - wy) * v10 + (1.0 - wx) * wy * v01 + wx * wy * v11
    }

    /// Value and spatial derivative of the bilinear interpolant.
    #[inline]
    pub(crate) fn sample_grad(
        &self,
        data: &[f32],
        width: usize,
        stride: usize,
        offset: usize,
    ) -> (f64, [f64; 2]) {
        let [v00, v10, v01, v11] = self.corners(data, width, stride, offset);
        let (wx, wy) = (self.wx, self.wy);
        let value =
            (1.0 - wx) * (1.0 - wy) * v00 + wx * (1.0 - wy) * v10 + (1.0 - wx) * wy * v01 + wx * wy * v11;
        let dx = if self.inside_x {
            (1.0 - wy) * (v10 - v00) + wy * (v11 - v01)
        } else {
            0.0
        };
        let dy = if self.inside_y {
            (1.0 - wx) * (v01 - v00) + wx * (v11 - v10)
        } else {
            0.0
        };
        (value, [dx, dy])
    }
}

#[inline]
fn axis(len: usize, c: f64) -> (usize, usize, f64, bool) {
    let max = (len - 1) as f64;
    let inside = c >= 0.0 && c < max;
    let c = c.clamp(0.0, max);
    let i0 = (c.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, c - i0 as f64, inside)
}

/// Bilinear interpolation of `plane` at a sub-pixel point.
pub fn bilinear_sample(plane: &Grid, point: [f64; 2]) -> Result<f64> {
    let [x, y] = point;
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinitePoint { x, y });
    }
    if plane.width == 0 || plane.height == 0 {
        return Err(Error::Empty("plane"));
    }
    Ok(sample_grid(plane, x, y))
}

#[inline]
pub(crate) fn sample_grid(plane: &Grid, x: f64, y: f64) -> f64 {
    Taps::new(plane.width, plane.height, x, y).sample(&plane.data, plane.width, 1, 0)
}

#[inline]
pub(crate) fn sample_rgb(frame: &Frame, x: f64, y: f64) -> [f64; 3] {
    let t = Taps::new(frame.width(), frame.height(), x, y);
    let d = frame.data();
    [
        t.sample(d, frame.width(), CHANNELS, 0),
        t.sample(d, frame.width(), CHANNELS, 1),
        t.sample(d, frame.width(), CHANNELS, 2),
    ]
}

/// Color and per-channel spatial gradient of the interpolant.
#[inline]
pub(crate) fn sample_rgb_grad(frame: &Frame, x: f64, y: f64) -> ([f64; 3], [[f64; 2]; 3]) {
    let t = Taps::new(frame.width(), frame.height(), x, y);
    let d = frame.data();
    let (r, gr) = t.sample_grad(d, frame.width(), CHANNELS, 0);
    let (g, gg) = t.sample_grad(d, frame.width(), CHANNELS, 1);
    let (b, gb) = t.sample_grad(d, frame.width(), CHANNELS, 2);
    ([r, g, b], [gr, gg, gb])
}

#[inline]
pub(crate) fn sample_flow(flow: &FlowField, x: f64, y: f64) -> [f64; 2] {
    let t = Taps::new(flow.width(), flow.height(), x, y);
    [
        t.sample(flow.u(), flow.width(), 1, 0),
        t.sample(flow.v(), flow.width(), 1, 0),
    ]
}

/// Reconstructs the source frame by sampling `target` at `p + flow(p)`.
pub fn warp_backward(target: &Frame, flow: &FlowField) -> Result<Frame> {
    ensure_dims(target.dims(), flow.dims())?;
    let (w, h) = target.dims();
    let mut data = Vec::with_capacity(w * h * CHANNELS);
    for y in 0..h {
        for x in 0..w {
            let [dx, dy] = flow.get(x, y);
            let c = sample_rgb(target, x as f64 + dx as f64, y as f64 + dy as f64);
            data.extend(c.iter().map(|&v| (v as f32).clamp(-0.5, 0.5)));
        }
    }
    Ok(Frame::from_raw(w, h, data, target.time_index()))
}

/// Samples the backward flow at forward-displaced positions (ŵ).
pub fn align_backward_flow(forward: &FlowField, backward: &FlowField) -> Result<FlowField> {
    ensure_dims(forward.dims(), backward.dims())?;
    let (w, h) = forward.dims();
    Ok(FlowField::from_fn(w, h, |x, y| {
        let [dx, dy] = forward.get(x, y);
        let s = sample_flow(backward, x as f64 + dx as f64, y as f64 + dy as f64);
        [s[0] as f32, s[1] as f32]
    }))
}

/// Per-pixel squared color difference, summed over channels, between `source`
/// and the flow-aligned `target`.
pub fn residual_map(source: &Frame, target: &Frame, flow: &FlowField) -> Result<Grid> {
    ensure_dims(source.dims(), target.dims())?;
    ensure_dims(source.dims(), flow.dims())?;
    let warped = warp_backward(target, flow)?;
    let data = source
        .data()
        .chunks_exact(CHANNELS)
        .zip(warped.data().chunks_exact(CHANNELS))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&p, &q)| {
                    let d = p as f64 - q as f64;
                    d * d
                })
                .sum::<f64>() as f32
        })
        .collect();
    Ok(Grid::from_vec(source.width(), source.height(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> Grid {
        Grid::from_fn(w, h, |x, y| (x + 10 * y) as f32)
    }

    #[test]
    fn lattice_point_is_exact() {
        let g = ramp(5, 6);
        assert_eq!(bilinear_sample(&g, [2.0, 3.0]).unwrap(), 32.0);
    }

    #[test]
    fn block_center_averages() {
        let g = Grid::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(bilinear_sample(&g, [0.5, 0.5]).unwrap(), 1.5);
    }

    #[test]
    fn outside_points_clamp() {
        let g = ramp(4, 4);
        assert_eq!(bilinear_sample(&g, [-0.7, 0.0]).unwrap(), g.get(0, 0) as f64);
        assert_eq!(bilinear_sample(&g, [9.0, 9.0]).unwrap(), g.get(3, 3) as f64);
    }

    #[test]
    fn non_finite_point_is_rejected() {
        let g = ramp(4, 4);
        assert!(matches!(
            bilinear_sample(&g, [f64::NAN, 0.0]),
            Err(Error::NonFinitePoint { .. })
        ));
    }

    #[test]
    fn single_pixel_plane() {
        let g = Grid::from_vec(1, 1, vec![4.0]);
        assert_eq!(bilinear_sample(&g, [0.3, -2.0]).unwrap(), 4.0);
    }

    #[test]
    fn interpolant_gradient_matches_difference() {
        let f = Frame::from_fn(6, 6, 0, |x, y| {
            let v = ((x * x) as f32) * 0.01 + y as f32 * 0.03;
            [v, -v, 0.5 * v]
        });
        let (_, d) = sample_rgb_grad(&f, 2.25, 3.5);
        let h = 1e-3;
        for c in 0..3 {
            let fx = (sample_rgb(&f, 2.25 + h, 3.5)[c] - sample_rgb(&f, 2.25 - h, 3.5)[c]) / (2.0 * h);
            let fy = (sample_rgb(&f, 2.25, 3.5 + h)[c] - sample_rgb(&f, 2.25, 3.5 - h)[c]) / (2.0 * h);
            assert!((d[c][0] - fx).abs() < 1e-6 && (d[c][1] - fy).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_flows_cancel_after_alignment() {
        let f = FlowField::constant(10, 8, [1.5, -0.5]);
        let b = FlowField::constant(10, 8, [-1.5, 0.5]);
        let a = align_backward_flow(&f, &b).unwrap();
        for y in 1..7 {
            for x in 1..8 {
                let s = a.get(x, y);
                assert_eq!(s[0] + f.get(x, y)[0], 0.0);
                assert_eq!(s[1] + f.get(x, y)[1], 0.0);
            }
        }
    }

    #[test]
    fn zero_forward_returns_backward() {
        let b = FlowField::from_fn(7, 5, |x, y| [x as f32 * 0.3, -(y as f32)]);
        let a = align_backward_flow(&FlowField::zeros(7, 5), &b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn residual_of_constant_frames() {
        let src = Frame::filled(5, 4, [-0.5; 3]);
        let tgt = Frame::filled(5, 4, [0.5; 3]);
        let flow = FlowField::constant(5, 4, [0.7, -1.2]);
        let r = residual_map(&src, &tgt, &flow).unwrap();
        assert!(r.data.iter().all(|&v| v == 3.0));
        let same = residual_map(&src, &src, &FlowField::zeros(5, 4)).unwrap();
        assert!(same.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let f = Frame::filled(5, 4, [0.0; 3]);
        assert!(warp_backward(&f, &FlowField::zeros(4, 4)).is_err());
        assert!(align_backward_flow(&FlowField::zeros(5, 4), &FlowField::zeros(5, 5)).is_err());
        assert!(residual_map(&f, &f, &FlowField::zeros(3, 3)).is_err());
    }

    proptest! {
        #[test]
        fn sampling_is_linear(
            p in proptest::collection::vec(-1.0f32..1.0, 20),
            q in proptest::collection::vec(-1.0f32..1.0, 20),
            a in -2.0f64..2.0, b in -2.0f64..2.0,
            x in -1.0f64..6.0, y in -1.0f64..5.0,
        ) {
            let gp = Grid::from_vec(5, 4, p);
            let gq = Grid::from_vec(5, 4, q);
            let combo = Grid::from_vec(
                5,
                4,
                gp.data.iter().zip(&gq.data).map(|(&u, &v)| (a * u as f64 + b * v as f64) as f32).collect(),
            );
            let lhs = bilinear_sample(&combo, [x, y]).unwrap();
            let rhs = a * bilinear_sample(&gp, [x, y]).unwrap() + b * bilinear_sample(&gq, [x, y]).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-5);
        }

        #[test]
        fn zero_flow_warp_is_identity(data in proptest::collection::vec(-0.5f32..=0.5, 6 * 5 * 3)) {
            let f = Frame::from_raw(6, 5, data, 0);
            let out = warp_backward(&f, &FlowField::zeros(6, 5)).unwrap();
            prop_assert_eq!(out, f);
        }
    }
}
