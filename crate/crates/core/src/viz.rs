//! Flow colorization and track overlays.

use image::{Rgb, RgbImage};

use crate::types::{FlowField, Frame, Trajectory, TRACK_LEN};

/// HSV with value 1 to 8-bit RGB. `hue` in degrees, `sat` in [0, 1].
pub fn hsv_to_rgb(hue: f64, sat: f64) -> [u8; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = sat;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = 1.0 - c;
    [r, g, b].map(|v| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Colorwheel encoding: hue from `atan2(v, u)`, saturation from magnitude
/// over `max_magnitude` (the field's own maximum when `None`). Zero flow is
/// white; invalid pixels are black.
pub fn flow_to_color(flow: &FlowField, max_magnitude: Option<f64>) -> RgbImage {
    let (w, h) = flow.dims();
    let max = max_magnitude.unwrap_or_else(|| flow.max_magnitude() as f64);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if !flow.is_valid(x, y) {
            return Rgb([0, 0, 0]);
        }
        let [u, v] = flow.get(x, y).map(|c| c as f64);
        let mag = u.hypot(v);
        if mag == 0.0 || max <= 0.0 {
            return Rgb([255, 255, 255]);
        }
        Rgb(hsv_to_rgb(v.atan2(u).to_degrees(), (mag / max).min(1.0)))
    })
}

/// 8-bit copy of a frame.
pub fn frame_to_rgb8(frame: &Frame) -> RgbImage {
    let (w, h) = frame.dims();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(frame
            .pixel(x as usize, y as usize)
            .map(|v| ((v as f64 + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

fn draw_line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], color: Rgb<u8>) {
    let steps = (b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (a[0] + t * (b[0] - a[0])).round();
        let y = (a[1] + t * (b[1] - a[1])).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Draws each track's path on `frame`, one hue per track. Segments touching an
/// invalid timestep are skipped.
pub fn draw_tracks(frame: &Frame, tracks: &[Trajectory]) -> RgbImage {
    let mut img = frame_to_rgb8(frame);
    let n = tracks.len().max(1) as f64;
    for (i, tr) in tracks.iter().enumerate() {
        let color = Rgb(hsv_to_rgb(360.0 * i as f64 / n, 1.0));
        for t in 1..TRACK_LEN {
            if tr.valid[t - 1] && tr.valid[t] {
                draw_line(&mut img, tr.points[t - 1], tr.points[t], color);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_color(&FlowField::zeros(4, 3), None);
        assert!(img.pixels().all(|p| p.0 == [255, 255, 255]));
    }

    #[test]
    fn opposite_flows_have_opposite_hues() {
        let f = FlowField::from_fn(2, 1, |x, _| if x == 0 { [3.0, 0.0] } else { [-3.0, 0.0] });
        let img = flow_to_color(&f, None);
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(1, 0).0, [0, 255, 255]);
    }

    #[test]
    fn track_overlay_marks_path() {
        let f = Frame::filled(10, 10, [0.0; 3]);
        let mut t = Trajectory::stationary([1.0, 1.0]);
        t.points[7] = [8.0, 1.0];
        let img = draw_tracks(&f, &[t]);
        assert_eq!(img.get_pixel(5, 1).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(5, 5).0, [128, 128, 128]);
    }
}
