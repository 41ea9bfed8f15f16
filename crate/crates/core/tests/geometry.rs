//! Warping, alignment and residuals against synthetic ground truth.

use motion_refine::consistency::{color_mask, flow_cycle_mask};
use motion_refine::models::{lk_flow, LkConfig, MotionModel, ReferenceModel};
use motion_refine::rng::RngStream;
use motion_refine::sampling::{align_backward_flow, bilinear_sample, residual_map, warp_backward};
use motion_refine::synthgen::*;
use motion_refine::types::{FlowField, Frame, Grid, TRACK_LEN};
use proptest::prelude::*;

mod common;
use common::{gather, integer_scene};

#[test]
fn integer_shift_reconstructs_interior() {
    let spec = integer_scene(1, [2.0, 0.0], [2.0, 0.0]);
    let (frames, _) = generate_sequence(&spec).unwrap();
    let flow = FlowField::constant(80, 60, [2.0, 0.0]);
    let warped = warp_backward(&frames[1], &flow).unwrap();
    for y in 0..60 {
        for x in 0..78 {
            assert_eq!(warped.pixel(x, y), frames[0].pixel(x, y), "({x},{y})");
        }
    }
}

#[test]
fn zero_flow_warp_is_bit_exact() {
    let spec = integer_scene(2, [1.0, -1.0], [3.0, 2.0]);
    let (frames, _) = generate_sequence(&spec).unwrap();
    let out = warp_backward(&frames[3], &FlowField::zeros(80, 60)).unwrap();
    assert_eq!(out.data(), frames[3].data());
}

#[test]
fn ground_truth_transports_color() {
    for (seed, bg, sp) in [(3, [1.0, 0.0], [-3.0, 2.0]), (4, [0.0, 2.0], [5.0, 0.0]), (5, [-2.0, -1.0], [1.0, 4.0])] {
        let spec = integer_scene(seed, bg, sp);
        let (frames, gt) = generate_sequence(&spec).unwrap();
        for t in 0..TRACK_LEN - 1 {
            let warped = warp_backward(&frames[t + 1], &gt.flows[t]).unwrap();
            let res = residual_map(&frames[t], &frames[t + 1], &gt.flows[t]).unwrap();
            let mask = color_mask(&frames[t], &frames[t + 1], &gt.flows[t], 0.1).unwrap();
            for y in 0..60 {
                for x in 0..80 {
                    if gt.occlusion[t].get(x, y) {
                        continue;
                    }
                    for c in 0..3 {
                        let d = (warped.pixel(x, y)[c] - frames[t].pixel(x, y)[c]).abs();
                        assert!(d < 1e-4, "seed {seed} t {t} ({x},{y}) diff {d}");
                    }
                    assert!(res.get(x, y) < 1e-6);
                    assert!(mask.get(x, y));
                }
            }
        }
    }
}

#[test]
fn alignment_matches_gather_oracle() {
    let corpus = generate_corpus(
        &CorpusConfig {
            clips: 3,
            width: 96,
            height: 64,
            ..CorpusConfig::default()
        },
        &RngStream::new(9, "align"),
    )
    .unwrap();
    let model = ReferenceModel::default();
    for clip in &corpus {
        let fwd = model.predict_flow(&clip.frames[2], &clip.frames[3]).unwrap();
        let bwd = model.predict_flow(&clip.frames[3], &clip.frames[2]).unwrap();
        let aligned = align_backward_flow(&fwd, &bwd).unwrap();
        let (w, h) = fwd.dims();
        for y in 0..h {
            for x in 0..w {
                let d = fwd.get(x, y);
                let px = x as f64 + d[0] as f64;
                let py = y as f64 + d[1] as f64;
                let u = gather(bwd.u(), w, h, px, py);
                let v = gather(bwd.v(), w, h, px, py);
                let a = aligned.get(x, y);
                assert!((a[0] as f64 - u).abs() < 1e-6 && (a[1] as f64 - v).abs() < 1e-6, "({x},{y})");
            }
        }
    }
}

#[test]
fn alignment_examples() {
    let b = FlowField::from_fn(6, 5, |x, y| [x as f32 * 0.5, -(y as f32)]);
    assert_eq!(align_backward_flow(&FlowField::zeros(6, 5), &b).unwrap(), b);
    let f = FlowField::constant(8, 8, [2.0, 1.0]);
    let a = align_backward_flow(&f, &FlowField::constant(8, 8, [-2.0, -1.0])).unwrap();
    for y in 0..7 {
        for x in 0..6 {
            let s = a.get(x, y);
            assert_eq!([s[0] + 2.0, s[1] + 1.0], [0.0, 0.0]);
        }
    }
}

#[test]
fn residual_of_black_against_white() {
    let black = Frame::filled(5, 4, [-0.5; 3]);
    let white = Frame::filled(5, 4, [0.5; 3]);
    let flow = FlowField::constant(5, 4, [1.3, -0.7]);
    let r = residual_map(&black, &white, &flow).unwrap();
    assert!(r.data.iter().all(|&v| v == 3.0));
}

#[test]
fn bilinear_examples() {
    let g = Grid::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]);
    assert_eq!(bilinear_sample(&g, [0.5, 0.5]).unwrap(), 1.5);
    let g = Grid::from_fn(5, 5, |x, y| (10 * y + x) as f32);
    assert_eq!(bilinear_sample(&g, [2.0, 3.0]).unwrap(), 32.0);
    assert_eq!(bilinear_sample(&g, [-0.7, 0.0]).unwrap(), 0.0);
}

#[test]
fn lk_recovers_integer_shift() {
    let spec = integer_scene(6, [3.0, 0.0], [3.0, 0.0]);
    let (frames, _) = generate_sequence(&spec).unwrap();
    let f = lk_flow(&frames[0], &frames[1], &LkConfig::default()).unwrap();
    let (mut sum, mut n) = (0.0, 0.0);
    for y in 12..48 {
        for x in 12..68 {
            let d = f.get(x, y);
            sum += ((d[0] - 3.0) as f64).hypot(d[1] as f64);
            n += 1.0;
        }
    }
    assert!(sum / n < 0.15, "mean error {}", sum / n);
}

#[test]
fn ground_truth_flow_passes_cycle_check() {
    let spec = integer_scene(7, [1.0, 1.0], [1.0, 1.0]);
    let (frames, gt) = generate_sequence(&spec).unwrap();
    let fwd = &gt.flows[0];
    let bwd = FlowField::constant(80, 60, [-1.0, -1.0]);
    let m = flow_cycle_mask(fwd, &bwd, 0.005, 0.25).unwrap();
    assert_eq!(m.count(), 80 * 60);
    assert_eq!(frames.len(), TRACK_LEN);
}

#[test]
fn sprite_translation_is_exact_inside() {
    let spec = integer_scene(8, [0.0, 0.0], [3.0, 0.0]);
    let (_, gt) = generate_sequence(&spec).unwrap();
    for t in 0..TRACK_LEN - 1 {
        let c = [30.0 + 3.0 * t as f64, 28.0];
        for dy in -4i32..=4 {
            for dx in -6i32..=6 {
                let (x, y) = ((c[0] as i32 + dx) as usize, (c[1] as i32 + dy) as usize);
                assert_eq!(gt.flows[t].get(x, y), [3.0, 0.0]);
            }
        }
    }
}

#[test]
fn chained_flow_reproduces_tracks() {
    let spec = integer_scene(10, [1.0, 0.0], [-2.0, 1.0]);
    let (_, gt) = generate_sequence(&spec).unwrap();
    for tr in &gt.tracks.trajectories {
        let mut p = tr.points[0];
        for t in 0..TRACK_LEN - 1 {
            // flow at a covered pixel belongs to the occluder
            if !tr.valid[t + 1] || !tr.visible[t] {
                break;
            }
            let (x, y) = (p[0].round() as usize, p[1].round() as usize);
            if x >= 80 || y >= 60 || (p[0] - x as f64).abs() > 1e-9 || (p[1] - y as f64).abs() > 1e-9 {
                break;
            }
            let d = gt.flows[t].get(x, y);
            p = [p[0] + d[0] as f64, p[1] + d[1] as f64];
            assert!((p[0] - tr.points[t + 1][0]).abs() < 1e-4 && (p[1] - tr.points[t + 1][1]).abs() < 1e-4);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_flow_alignment_matches_gather(seed in any::<u64>()) {
        use rand::Rng;
        let mut r = RngStream::new(seed, "prop-align").rng();
        let (w, h) = (r.random_range(2..9), r.random_range(2..9));
        let fwd = FlowField::from_fn(w, h, |_, _| [r.random_range(-4.0..4.0), r.random_range(-4.0..4.0)]);
        let bwd = FlowField::from_fn(w, h, |_, _| [r.random_range(-4.0..4.0), r.random_range(-4.0..4.0)]);
        let a = align_backward_flow(&fwd, &bwd).unwrap();
        for y in 0..h {
            for x in 0..w {
                let d = fwd.get(x, y);
                let (px, py) = (x as f64 + d[0] as f64, y as f64 + d[1] as f64);
                let s = a.get(x, y);
                prop_assert!((s[0] as f64 - gather(bwd.u(), w, h, px, py)).abs() < 1e-6);
                prop_assert!((s[1] as f64 - gather(bwd.v(), w, h, px, py)).abs() < 1e-6);
            }
        }
    }
}
