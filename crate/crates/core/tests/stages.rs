//! Pseudo-labelling, augmentation, training and persisted-stage checks.

use motion_refine::config::PipelineConfig;
use motion_refine::consistency::*;
use motion_refine::finetune::*;
use motion_refine::models::*;
use motion_refine::pipeline::*;
use motion_refine::rng::RngStream;
use motion_refine::synthgen::generate_sequence;
use motion_refine::types::{FlowField, Frame, VideoClip};
use motion_refine::Result;
use proptest::prelude::*;
use rand::Rng;

mod common;

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.corpus.clips = 2;
    cfg.corpus.width = 64;
    cfg.corpus.height = 48;
    cfg.train.kappa = 6;
    cfg.train.batch_size = 16;
    cfg.train.accumulation = 2;
    cfg.train.checkpoint_every = 3;
    cfg
}

/// Always predicts zero motion.
struct Still;

impl MotionModel for Still {
    fn iterations(&self) -> usize {
        1
    }

    fn estimate_flow(&self, source: &Frame, _: &Frame) -> Result<Vec<FlowField>> {
        let (w, h) = source.dims();
        Ok(vec![FlowField::zeros(w, h)])
    }
}

/// Uniform noise in [-20, 20] px, seeded by the frame contents.
struct Noise;

impl MotionModel for Noise {
    fn iterations(&self) -> usize {
        1
    }

    fn estimate_flow(&self, source: &Frame, target: &Frame) -> Result<Vec<FlowField>> {
        let key = |f: &Frame| f.data().iter().take(64).fold(0u64, |a, v| a.rotate_left(5) ^ v.to_bits() as u64);
        let mut r = RngStream::new(key(source), &format!("noise{}", key(target))).rng();
        let (w, h) = source.dims();
        Ok(vec![FlowField::from_fn(w, h, |_, _| [r.random_range(-20.0..20.0), r.random_range(-20.0..20.0)])])
    }
}

fn static_clip() -> VideoClip {
    let spec = common::integer_scene(21, [0.0, 0.0], [0.0, 0.0]);
    let (frames, _) = generate_sequence(&spec).unwrap();
    VideoClip::new("still", frames)
}

#[test]
fn perfect_model_on_static_clip_accepts_everything() {
    let clip = static_clip();
    for mode in [LabelMode::Flow, LabelMode::Track] {
        let set = generate_pseudolabels(&[clip.clone()], &Still, &FilterConfig::default(), mode, &RngStream::new(0, "r")).unwrap();
        assert_eq!(set.acceptance_fraction(), 1.0, "{mode}");
        assert!(!set.is_empty());
    }
}

#[test]
fn random_model_is_almost_always_rejected() {
    let cfg = small_config();
    let vids = videos(&build_corpus(&cfg).unwrap());
    let set = generate_pseudolabels(&vids, &Noise, &cfg.filter, LabelMode::Flow, &RngStream::new(0, "r")).unwrap();
    assert!(set.acceptance_fraction() < 0.01, "{}", set.acceptance_fraction());
    let set = generate_pseudolabels(&vids, &Noise, &cfg.filter, LabelMode::Track, &RngStream::new(0, "r")).unwrap();
    assert!(set.acceptance_fraction() < 0.01, "{}", set.acceptance_fraction());
}

#[test]
fn ground_truth_labels_carry_ground_truth_flow() {
    let cfg = small_config();
    let clips = build_corpus(&cfg).unwrap();
    let set = pseudolabels(&cfg, &reference_model(&cfg), &videos(&clips)).unwrap();
    assert!(set.accepted <= set.total);
    for l in set.flow.iter().take(200) {
        let c = clips.iter().find(|c| c.id == l.clip).unwrap();
        assert_eq!(l.frame % cfg.filter.stride, 0);
        assert!(l.x >= 0.0 && l.y >= 0.0 && l.x <= 63.0 && l.y <= 47.0);
        assert!(l.frame + 1 < c.frames.len());
    }
}

#[test]
fn training_lowers_the_augmented_label_loss() {
    let cfg = PipelineConfig::default();
    let clips = build_corpus(&cfg).unwrap();
    let vids = videos(&clips);
    let base = reference_model(&cfg);
    let labels = pseudolabels(&cfg, &base, &vids).unwrap();
    let out = refine(&cfg, &cfg.train, Objective::PseudoLabel, &base, &vids, Some(&labels)).unwrap();
    let samples = samples_from_labels(&vids, &labels).unwrap();
    let (mut before, mut after) = (0.0, 0.0);
    for v in &vids {
        // labels are the frozen model's own outputs, so only augmented views
        // carry a training signal
        let pairs: Vec<TrainPair> = samples
            .iter()
            .filter(|s| s.video == v.id)
            .enumerate()
            .map(|(i, s)| {
                let a = augment(s, &cfg.train.augmentation, &RngStream::new(99, &format!("probe{i}"))).unwrap();
                TrainPair {
                    source: a.source,
                    target: a.target,
                    labels: a.labels,
                }
            })
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let log = &out.logs[&v.id];
        assert_eq!(log.len(), cfg.train.kappa);
        assert!(log.iter().all(|r| r.loss.is_finite()));
        before += head_gradient(&base, &pairs, cfg.train.discount).unwrap().1;
        after += head_gradient(out.models.for_clip(&v.id), &pairs, cfg.train.discount).unwrap().1;
    }
    assert!(after < before, "label loss {before} -> {after}");
}

#[test]
fn stages_rerun_from_persisted_artifacts() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    run_synth(&cfg, &layout).unwrap();
    let clips = load_corpus(&layout.corpus()).unwrap();
    let fresh = build_corpus(&cfg).unwrap();
    for (a, b) in clips.iter().zip(&fresh) {
        assert_eq!(a.flows, b.flows);
        assert_eq!(a.tracks, b.tracks);
        assert_eq!(a.occlusion, b.occlusion);
    }

    run_pseudolabel(&cfg, &layout).unwrap();
    let m = run_finetune(&cfg, &layout).unwrap();
    assert!(m.artifacts.keys().any(|k| k.contains("checkpoints/")));
    run_estimate(&cfg, &layout, false).unwrap();
    let (_, first) = run_eval(&cfg, &layout, None).unwrap();
    // the second finetune reads only what the first pass left on disk
    run_finetune(&cfg, &layout).unwrap();
    run_estimate(&cfg, &layout, false).unwrap();
    let (_, second) = run_eval(&cfg, &layout, None).unwrap();
    assert_eq!(first, second);
    for cmd in ["synth", "pseudolabel", "finetune", "estimate", "eval"] {
        let path = layout.manifest(cmd);
        let text = std::fs::read_to_string(&path).unwrap();
        let man = motion_refine::io::Manifest::from_text(&text, "m").unwrap();
        assert!(man.verify(dir.path()).is_empty(), "{cmd}");
        assert_eq!(man.config_hash, cfg.hash());
    }
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    run_synth(&cfg, &layout).unwrap();
    let clips = load_corpus(&layout.corpus()).unwrap();
    let (flow, tracks) = evaluate_dir(&cfg, &clips, &layout.corpus()).unwrap();
    let all = |r: &motion_refine::metrics::EvalReport, col: &str| {
        let j = r.columns.iter().position(|c| c == col).unwrap();
        r.rows.iter().find(|(n, _)| n == "all").unwrap().1[j].unwrap()
    };
    assert_eq!(all(&flow, "epe"), 0.0);
    assert_eq!(all(&tracks, "ate"), 0.0);
    assert_eq!(all(&tracks, "delta"), 100.0);
    assert_eq!(all(&tracks, "survival"), 1.0);
}

#[test]
fn missing_stage_inputs_are_reported() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    assert!(matches!(run_pseudolabel(&cfg, &layout), Err(motion_refine::Error::MissingInput(_))));
    run_synth(&cfg, &layout).unwrap();
    assert!(matches!(run_finetune(&cfg, &layout), Err(motion_refine::Error::MissingInput(_))));
}

#[test]
fn looser_tau_accepts_a_superset() {
    let mut cfg = small_config();
    cfg.filter.rebalance = false;
    cfg.filter.densify = false;
    let vids = videos(&build_corpus(&cfg).unwrap());
    let model = reference_model(&cfg);
    let ds: Vec<ClipDecisions> = vids
        .iter()
        .map(|v| clip_decisions(v, &model, &cfg.filter, LabelMode::Track, false).unwrap())
        .collect();
    let mut prev: Option<Vec<TrackLabel>> = None;
    for tau in [0.5, 1.0, 2.5, 5.0, 10.0] {
        let mut f = cfg.filter.clone();
        f.tau = tau;
        let set = labels_from_decisions(&vids, &ds, &f, &RngStream::new(0, "r")).unwrap();
        if let Some(p) = &prev {
            assert!(p.iter().all(|l| set.tracks.contains(l)), "tau {tau}");
        }
        prev = Some(set.tracks);
    }
}

fn field(r: &mut impl Rng, w: usize, h: usize, amp: f32) -> FlowField {
    FlowField::from_fn(w, h, |_, _| [r.random_range(-amp..amp), r.random_range(-amp..amp)])
}

fn bins_of(mags: &[f64], bins: usize) -> Vec<usize> {
    let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mags.iter()
        .map(|&m| {
            if hi > lo {
                (((m - lo) / ((hi - lo) / bins as f64)) as usize).min(bins - 1)
            } else {
                0
            }
        })
        .collect()
}

fn still_sample(seed: u64, n: usize) -> TrainSample {
    let spec = common::integer_scene(seed, [2.0, 1.0], [-1.0, 2.0]);
    let (frames, truth) = generate_sequence(&spec).unwrap();
    let mut r = RngStream::new(seed, "aug-labels").rng();
    let labels = (0..n)
        .map(|_| {
            let (x, y) = (r.random_range(0..80), r.random_range(0..60));
            let d = truth.flows[0].get(x, y);
            PointLabel {
                x: x as f64,
                y: y as f64,
                dx: d[0] as f64,
                dy: d[1] as f64,
            }
        })
        .collect();
    TrainSample {
        video: "v".into(),
        source: frames[0].clone(),
        target: frames[1].clone(),
        labels,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rebalance_only_trims_bins_above_the_median(
        mags in proptest::collection::vec(0.0f64..30.0, 1..200),
        bins in 1usize..12,
        seed in any::<u64>(),
    ) {
        let keep = rebalance_indices(&mags, bins, &RngStream::new(seed, "rb")).unwrap();
        prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(keep.iter().all(|&i| i < mags.len()));
        let which = bins_of(&mags, bins);
        let mut before = vec![0usize; bins];
        let mut after = vec![0usize; bins];
        for &b in &which {
            before[b] += 1;
        }
        for &i in &keep {
            after[which[i]] += 1;
        }
        let mut occupied: Vec<usize> = before.iter().copied().filter(|&c| c > 0).collect();
        occupied.sort_unstable();
        let median = occupied[(occupied.len() - 1) / 2];
        for b in 0..bins {
            prop_assert!(after[b] <= before[b]);
            if before[b] <= median {
                prop_assert_eq!(after[b], before[b]);
            } else {
                prop_assert_eq!(after[b], median);
            }
        }
    }

    #[test]
    fn augmentation_keeps_labels_on_their_pixels(seed in any::<u64>(), hflip in any::<bool>(), vflip in any::<bool>()) {
        let sample = still_sample(seed % 7, 24);
        let spec = AugmentationSpec {
            crop: (0.6, 1.0),
            scale: (0.8, 1.25),
            hflip: if hflip { 1.0 } else { 0.0 },
            vflip: if vflip { 1.0 } else { 0.0 },
            ..AugmentationSpec::identity()
        };
        let aug = augment(&sample, &spec, &RngStream::new(seed, "aug")).unwrap();
        let g = &aug.geometry;
        prop_assert_eq!(aug.source.dims(), g.out_size);
        prop_assert_eq!(aug.target.dims(), g.out_size);
        prop_assert!(!aug.labels.is_empty());
        let (w, h) = g.out_size;
        for l in &aug.labels {
            prop_assert!(l.x >= 0.0 && l.y >= 0.0 && l.x <= (w - 1) as f64 && l.y <= (h - 1) as f64);
            let p = g.unmap_point([l.x, l.y]);
            let q = g.unmap_point([l.x + l.dx, l.y + l.dy]);
            let orig = sample.labels.iter().find(|o| (o.x - p[0]).abs() < 1e-9 && (o.y - p[1]).abs() < 1e-9);
            prop_assert!(orig.is_some());
            let o = orig.unwrap();
            prop_assert!((o.x + o.dx - q[0]).abs() < 1e-9 && (o.y + o.dy - q[1]).abs() < 1e-9);
        }
        // every output pixel is the bilinear source sample at its preimage
        for (y, x) in [(0usize, 0usize), (h / 2, w / 3), (h - 1, w - 1)] {
            let p = g.unmap_point([x as f64, y as f64]);
            let got = aug.source.pixel(x, y);
            let plane: Vec<Vec<f32>> = (0..3)
                .map(|c| sample.source.data().iter().skip(c).step_by(3).copied().collect())
                .collect();
            for c in 0..3 {
                let want = common::gather(&plane[c], 80, 60, p[0], p[1]);
                prop_assert!((got[c] as f64 - want).abs() < 1e-5, "({},{}) c{}: {} vs {}", x, y, c, got[c], want);
            }
        }
    }

    #[test]
    fn flow_filters_grow_with_their_thresholds(seed in any::<u64>(), lo in 0.0f64..0.5, extra in 0.0f64..0.5) {
        let mut r = RngStream::new(seed, "mono").rng();
        let (w, h) = (12, 9);
        let fwd = field(&mut r, w, h, 3.0);
        let bwd = FlowField::from_fn(w, h, |x, y| {
            let f = fwd.get(x, y);
            [-f[0] + r.random_range(-0.6f32..0.6), -f[1] + r.random_range(-0.6f32..0.6)]
        });
        let subset = |a: &motion_refine::types::Mask, b: &motion_refine::types::Mask| a.data.iter().zip(&b.data).all(|(x, y)| !*x || *y);
        let hi = lo + extra;
        let (a, b) = (flow_cycle_mask(&fwd, &bwd, lo * 0.02, 0.25).unwrap(), flow_cycle_mask(&fwd, &bwd, hi * 0.02, 0.25).unwrap());
        prop_assert!(subset(&a, &b));
        let src = Frame::from_fn(w, h, 0, |_, _| [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)]);
        let tgt = Frame::from_fn(w, h, 1, |_, _| [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)]);
        let (a, b) = (color_mask(&src, &tgt, &fwd, lo).unwrap(), color_mask(&src, &tgt, &fwd, hi).unwrap());
        prop_assert!(subset(&a, &b));
    }

    #[test]
    fn track_cycle_check_is_symmetric(seed in any::<u64>(), tau in 0.1f64..10.0) {
        let mut r = RngStream::new(seed, "sym").rng();
        let mut walk = |start: [f64; 2]| {
            let mut t = motion_refine::types::Trajectory::stationary(start);
            for k in 1..motion_refine::types::TRACK_LEN {
                let p = t.points[k - 1];
                t.points[k] = [p[0] + r.random_range(-3.0..3.0), p[1] + r.random_range(-3.0..3.0)];
            }
            t
        };
        let fwd = walk([20.0, 20.0]);
        let mut bwd = fwd.time_flipped();
        for p in bwd.points.iter_mut().skip(1) {
            p[0] += r.random_range(-1.5..1.5);
            p[1] += r.random_range(-1.5..1.5);
        }
        prop_assert_eq!(
            trajectory_cycle_mask(&fwd, &bwd.time_flipped(), tau),
            trajectory_cycle_mask(&bwd, &fwd.time_flipped(), tau)
        );
        prop_assert_eq!(track_cycle_error(&fwd, &bwd.time_flipped()), track_cycle_error(&bwd, &fwd.time_flipped()));
    }
}
