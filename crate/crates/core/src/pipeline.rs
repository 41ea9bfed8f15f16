//! Stages of the refinement pipeline, their on-disk layout, and the sweeps
//! behind the `ablate` command.
//!
//! Layout under the output root:
//!
//! ```text
//! corpus/clips.txt                 clip ids, one per line
//! corpus/<clip>/frame_<t>.png      16-bit RGB frames
//! corpus/<clip>/flow_<t>.flo       ground-truth flow t -> t+1
//! corpus/<clip>/occ_<t>.png        occlusion of frame t at t+1 (255 = occluded)
//! corpus/<clip>/tracks.txt         ground-truth tracks
//! labels/labels.txt                pseudo-labels
//! labels/acceptance.csv
//! models/<clip|shared>.model       fine-tuned heads (+ .log.csv)
//! models/checkpoints/<name>.step<N>.model
//! estimate/<clip>/flow_<t>.flo, estimate/<clip>/tracks.txt
//! eval/report.csv, eval/report.txt
//! viz/<clip>/flow_<t>.png, viz/<clip>/tracks.png
//! ablate/{tau,kappa,filters,objectives}.csv
//! manifest-<command>.txt
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{EvalPairs, PipelineConfig};
use crate::consistency::{clip_decisions, generate_pseudolabels, labels_from_decisions, ClipDecisions, LabelMode, PseudoLabelSet};
use crate::error::{Error, Result};
use crate::finetune::{finetune, log_to_csv, samples_from_clips, samples_from_labels, LogRow, Objective, TrainConfig, VideoMode};
use crate::io::{self, Manifest};
use crate::metrics::{self, EvalReport, TrackMetrics};
use crate::models::{CorrectionHead, MotionModel, ReferenceModel};
use crate::rng::RngStream;
use crate::synthgen::{domain_shift, generate_corpus};
use crate::types::{FlowField, Frame, Mask, Trajectory, TrajectorySet, VideoClip, TRACK_LEN};
use crate::viz;

/// A clip with everything evaluation needs.
#[derive(Debug, Clone)]
pub struct ClipData {
    pub id: String,
    pub frames: Vec<Frame>,
    pub flows: Vec<FlowField>,
    pub occlusion: Vec<Mask>,
    pub tracks: TrajectorySet,
}

impl ClipData {
    pub fn video(&self) -> VideoClip {
        VideoClip::new(self.id.clone(), self.frames.clone())
    }
}

pub fn videos(clips: &[ClipData]) -> Vec<VideoClip> {
    clips.iter().map(ClipData::video).collect()
}

/// Generates the synthetic corpus and applies the configured domain shift.
pub fn build_corpus(cfg: &PipelineConfig) -> Result<Vec<ClipData>> {
    let clips = generate_corpus(&cfg.corpus, &RngStream::new(cfg.seed, "corpus"))?;
    clips
        .into_iter()
        .map(|c| {
            let mut tracks = c.truth.tracks;
            tracks.clip = c.id.clone();
            Ok(ClipData {
                frames: domain_shift(&c.frames, cfg.shift_kind, cfg.shift_magnitude)?,
                id: c.id,
                flows: c.truth.flows,
                occlusion: c.truth.occlusion,
                tracks,
            })
        })
        .collect()
}

/// The frozen reference model described by the config.
pub fn reference_model(cfg: &PipelineConfig) -> ReferenceModel {
    ReferenceModel {
        lk: cfg.lk.clone(),
        head: CorrectionHead::zero(cfg.head_steps),
    }
}

pub fn pseudolabels(cfg: &PipelineConfig, model: &ReferenceModel, clips: &[VideoClip]) -> Result<PseudoLabelSet> {
    generate_pseudolabels(clips, model, &cfg.filter, cfg.mode, &RngStream::new(cfg.seed, "rebalance"))
}

/// Models after fine-tuning: one per clip, or one shared by all clips.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub base: ReferenceModel,
    pub shared: Option<ReferenceModel>,
    pub per_clip: BTreeMap<String, ReferenceModel>,
}

pub const SHARED_MODEL: &str = "shared";

impl ModelSet {
    pub fn frozen(base: ReferenceModel) -> Self {
        ModelSet {
            base,
            shared: None,
            per_clip: BTreeMap::new(),
        }
    }

    pub fn for_clip(&self, id: &str) -> &ReferenceModel {
        self.per_clip.get(id).or(self.shared.as_ref()).unwrap_or(&self.base)
    }

    /// Named models in file order.
    pub fn named(&self) -> Vec<(String, &ReferenceModel)> {
        let mut out: Vec<(String, &ReferenceModel)> = self.per_clip.iter().map(|(k, m)| (k.clone(), m)).collect();
        if let Some(m) = &self.shared {
            out.push((SHARED_MODEL.to_string(), m));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub models: ModelSet,
    pub logs: BTreeMap<String, Vec<LogRow>>,
    pub checkpoints: BTreeMap<String, Vec<(usize, ReferenceModel)>>,
}

/// Fine-tunes `base` on the clips: per clip in single-video mode, one model
/// over all clips in sequence in multi-video mode. Clips without labels keep
/// the base model.
pub fn refine(
    cfg: &PipelineConfig,
    train: &TrainConfig,
    objective: Objective,
    base: &ReferenceModel,
    clips: &[VideoClip],
    labels: Option<&PseudoLabelSet>,
) -> Result<RefineOutput> {
    let samples = match objective {
        Objective::PseudoLabel => {
            let labels = labels.ok_or(Error::Empty("pseudo-labels"))?;
            samples_from_labels(clips, labels)?
        }
        _ => samples_from_clips(clips, cfg.filter.stride),
    };
    let train = TrainConfig {
        seed: cfg.seed,
        ..train.clone()
    };
    let mut out = RefineOutput {
        models: ModelSet::frozen(base.clone()),
        logs: BTreeMap::new(),
        checkpoints: BTreeMap::new(),
    };
    match train.mode {
        VideoMode::Single => {
            let results: Vec<(String, Option<crate::finetune::TrainOutput>)> = clips
                .par_iter()
                .map(|c| {
                    let own: Vec<_> = samples.iter().filter(|s| s.video == c.id).cloned().collect();
                    if own.is_empty() || (objective == Objective::PseudoLabel && own.iter().all(|s| s.labels.is_empty())) {
                        log::warn!("{}: no training samples, keeping the base model", c.id);
                        return Ok((c.id.clone(), None));
                    }
                    finetune(base, &own, objective, &train).map(|o| (c.id.clone(), Some(o)))
                })
                .collect::<Result<_>>()?;
            for (id, r) in results {
                if let Some(r) = r {
                    out.models.per_clip.insert(id.clone(), r.model);
                    out.logs.insert(id.clone(), r.log);
                    out.checkpoints.insert(id, r.checkpoints);
                }
            }
        }
        VideoMode::Multi => {
            let r = finetune(base, &samples, objective, &train)?;
            out.models.shared = Some(r.model);
            out.logs.insert(SHARED_MODEL.to_string(), r.log);
            out.checkpoints.insert(SHARED_MODEL.to_string(), r.checkpoints);
        }
    }
    Ok(out)
}

/// Frame indices `t` of the pairs `(t, t + 1)` scored by flow evaluation.
pub fn eval_pair_indices(pairs: EvalPairs, frames: usize) -> Vec<usize> {
    let n = frames.saturating_sub(1);
    match pairs {
        EvalPairs::HeldOut => (1..n).step_by(2).collect(),
        EvalPairs::All => (0..n).collect(),
    }
}

fn visible_mask(occ: &Mask) -> Mask {
    Mask {
        width: occ.width,
        height: occ.height,
        data: occ.data.iter().map(|&o| !o).collect(),
    }
}

/// Drops the validity mask so disk round trips score the same pixels.
fn plain(flow: &FlowField) -> Result<FlowField> {
    FlowField::from_planes(flow.width(), flow.height(), flow.u().to_vec(), flow.v().to_vec())
}

/// Pooled end-point error over the visible pixels of the scored pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowScore {
    pub epe: f64,
    pub per_clip: Vec<(String, f64)>,
}

fn pooled_epe<F>(clips: &[ClipData], pairs: EvalPairs, predict: F) -> Result<FlowScore>
where
    F: Fn(&ClipData, usize) -> Result<FlowField> + Sync,
{
    let parts: Vec<(String, f64, usize)> = clips
        .par_iter()
        .map(|c| {
            let (mut sum, mut count) = (0.0, 0usize);
            for t in eval_pair_indices(pairs, c.frames.len()) {
                let pred = plain(&predict(c, t)?)?;
                let mask = visible_mask(&c.occlusion[t]);
                let n = mask.count();
                if n > 0 {
                    sum += metrics::epe(&pred, &c.flows[t], Some(&mask))? * n as f64;
                    count += n;
                }
            }
            Ok((c.id.clone(), sum, count))
        })
        .collect::<Result<_>>()?;
    let total: usize = parts.iter().map(|p| p.2).sum();
    if total == 0 {
        return Err(Error::Empty("visible pixels in scored pairs"));
    }
    Ok(FlowScore {
        epe: parts.iter().map(|p| p.1).sum::<f64>() / total as f64,
        per_clip: parts
            .into_iter()
            .map(|(id, s, n)| (id, if n > 0 { s / n as f64 } else { f64::NAN }))
            .collect(),
    })
}

pub fn eval_flow(models: &ModelSet, clips: &[ClipData], pairs: EvalPairs) -> Result<FlowScore> {
    pooled_epe(clips, pairs, |c, t| models.for_clip(&c.id).predict_flow(&c.frames[t], &c.frames[t + 1]))
}

/// Query points of ground-truth tracks, which must start at frame 0.
pub fn track_queries(gt: &TrajectorySet) -> Result<Vec<[f64; 2]>> {
    gt.trajectories
        .iter()
        .map(|t| {
            if t.query_index == 0 {
                Ok(t.points[0])
            } else {
                Err(Error::InvalidArgument(format!("{}: tracks must be queried at frame 0", gt.clip)))
            }
        })
        .collect()
}

pub fn predict_tracks(models: &ModelSet, clips: &[ClipData]) -> Result<Vec<TrajectorySet>> {
    clips
        .par_iter()
        .map(|c| {
            let q = track_queries(&c.tracks)?;
            let trajectories = if q.is_empty() {
                Vec::new()
            } else {
                models.for_clip(&c.id).predict_tracks(&c.frames[..TRACK_LEN], &q)?
            };
            Ok(TrajectorySet {
                clip: c.id.clone(),
                width: c.tracks.width,
                height: c.tracks.height,
                trajectories,
            })
        })
        .collect()
}

fn score_tracks(cfg: &PipelineConfig, pred: &[TrajectorySet], clips: &[ClipData]) -> Result<TrackMetrics> {
    let mut p: Vec<Trajectory> = Vec::new();
    let mut g: Vec<Trajectory> = Vec::new();
    for (ps, c) in pred.iter().zip(clips) {
        if ps.trajectories.len() != c.tracks.trajectories.len() {
            return Err(Error::ShapeMismatch {
                expected: (c.tracks.trajectories.len(), TRACK_LEN),
                actual: (ps.trajectories.len(), TRACK_LEN),
            });
        }
        p.extend(ps.trajectories.iter().cloned());
        g.extend(c.tracks.trajectories.iter().cloned());
    }
    metrics::evaluate_tracks(&p, &g, cfg.ate_norm, cfg.survival_threshold)
}

pub fn eval_tracks(cfg: &PipelineConfig, models: &ModelSet, clips: &[ClipData]) -> Result<TrackMetrics> {
    score_tracks(cfg, &predict_tracks(models, clips)?, clips)
}

/// One row of the τ sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct TauRow {
    pub tau: f64,
    pub labels: usize,
    pub acceptance: f64,
    pub metrics: TrackMetrics,
}

/// Track-mode fine-tuning at every τ of `cfg.ablate_taus`. The model runs
/// once; only the threshold changes between rows.
pub fn tau_sweep(cfg: &PipelineConfig, clips: &[ClipData]) -> Result<Vec<TauRow>> {
    let base = reference_model(cfg);
    let vids = videos(clips);
    let decisions: Vec<ClipDecisions> = vids
        .par_iter()
        .map(|v| clip_decisions(v, &base, &cfg.filter, LabelMode::Track, true))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &tau in &cfg.ablate_taus {
        let mut filter = cfg.filter.clone();
        filter.tau = tau;
        let labels = labels_from_decisions(&vids, &decisions, &filter, &RngStream::new(cfg.seed, "rebalance"))?;
        let refined = refine(cfg, &cfg.train, Objective::PseudoLabel, &base, &vids, Some(&labels))?;
        let m = eval_tracks(cfg, &refined.models, clips)?;
        log::info!("tau {tau}: {} labels, ATE {:.4}", labels.len(), m.ate);
        rows.push(TauRow {
            tau,
            labels: labels.len(),
            acceptance: labels.acceptance_fraction(),
            metrics: m,
        });
    }
    Ok(rows)
}

/// Index of the smallest ATE; ties keep the first.
pub fn best_tau_index(rows: &[TauRow]) -> Option<usize> {
    (0..rows.len()).min_by(|&a, &b| rows[a].metrics.ate.total_cmp(&rows[b].metrics.ate))
}

pub fn tau_csv(rows: &[TauRow]) -> String {
    let mut s = String::from("tau,labels,acceptance,ate,ate_vis,ate_occ,mte,delta,survival,aj\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:?}"));
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{:?},{},{:?},{:?},{},{},{:?},{:?},{:?},{}",
            r.tau,
            r.labels,
            r.acceptance,
            m.ate,
            opt(m.ate_vis),
            opt(m.ate_occ),
            m.mte,
            m.delta,
            m.survival,
            opt(m.aj)
        );
    }
    s
}

/// One row of the κ sweep: flow EPE or track ATE, depending on the mode.
#[derive(Debug, Clone, PartialEq)]
pub struct KappaRow {
    pub kappa: usize,
    pub score: f64,
}

pub fn kappa_sweep(cfg: &PipelineConfig, clips: &[ClipData]) -> Result<Vec<KappaRow>> {
    let base = reference_model(cfg);
    let vids = videos(clips);
    let labels = pseudolabels(cfg, &base, &vids)?;
    cfg.ablate_kappas
        .iter()
        .map(|&kappa| {
            let train = TrainConfig { kappa, ..cfg.train.clone() };
            let refined = refine(cfg, &train, Objective::PseudoLabel, &base, &vids, Some(&labels))?;
            let score = match cfg.mode {
                LabelMode::Flow => eval_flow(&refined.models, clips, cfg.eval_pairs)?.epe,
                LabelMode::Track => eval_tracks(cfg, &refined.models, clips)?.ate,
            };
            Ok(KappaRow { kappa, score })
        })
        .collect()
}

pub fn kappa_csv(rows: &[KappaRow], mode: LabelMode) -> String {
    let metric = match mode {
        LabelMode::Flow => "epe",
        LabelMode::Track => "ate",
    };
    let mut s = format!("kappa,{metric}\n");
    for r in rows {
        let _ = writeln!(s, "{},{:?}", r.kappa, r.score);
    }
    s
}

/// One row of a comparison table: a named variant, how many labels it
/// trained on, and its held-out flow EPE.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantRow {
    pub name: String,
    pub labels: usize,
    pub acceptance: f64,
    pub epe: f64,
}

/// Flow-mode fine-tuning with the cycle filter, the color filter, and both.
pub fn filter_study(cfg: &PipelineConfig, clips: &[ClipData]) -> Result<Vec<VariantRow>> {
    let base = reference_model(cfg);
    let vids = videos(clips);
    let decisions: Vec<ClipDecisions> = vids
        .par_iter()
        .map(|v| clip_decisions(v, &base, &cfg.filter, LabelMode::Flow, false))
        .collect::<Result<_>>()?;
    let mut rows = vec![VariantRow {
        name: "frozen".into(),
        labels: 0,
        acceptance: 0.0,
        epe: eval_flow(&ModelSet::frozen(base.clone()), clips, cfg.eval_pairs)?.epe,
    }];
    for (name, cycle, color) in [("cycle", true, false), ("color", false, true), ("cycle+color", true, true)] {
        let mut filter = cfg.filter.clone();
        filter.use_cycle = cycle;
        filter.use_color = color;
        let labels = labels_from_decisions(&vids, &decisions, &filter, &RngStream::new(cfg.seed, "rebalance"))?;
        let refined = refine(cfg, &cfg.train, Objective::PseudoLabel, &base, &vids, Some(&labels))?;
        rows.push(VariantRow {
            name: name.into(),
            labels: labels.len(),
            acceptance: labels.acceptance_fraction(),
            epe: eval_flow(&refined.models, clips, cfg.eval_pairs)?.epe,
        });
    }
    Ok(rows)
}

/// Flow-mode fine-tuning with each objective, against the frozen model.
pub fn objective_study(cfg: &PipelineConfig, clips: &[ClipData], objectives: &[Objective]) -> Result<Vec<VariantRow>> {
    let base = reference_model(cfg);
    let vids = videos(clips);
    let mut flow_cfg = cfg.clone();
    flow_cfg.mode = LabelMode::Flow;
    let labels = pseudolabels(&flow_cfg, &base, &vids)?;
    let mut rows = vec![VariantRow {
        name: "frozen".into(),
        labels: 0,
        acceptance: 0.0,
        epe: eval_flow(&ModelSet::frozen(base.clone()), clips, cfg.eval_pairs)?.epe,
    }];
    for &o in objectives {
        let refined = refine(cfg, &cfg.train, o, &base, &vids, Some(&labels))?;
        let used = o == Objective::PseudoLabel;
        rows.push(VariantRow {
            name: o.to_string(),
            labels: if used { labels.len() } else { 0 },
            acceptance: if used { labels.acceptance_fraction() } else { 0.0 },
            epe: eval_flow(&refined.models, clips, cfg.eval_pairs)?.epe,
        });
    }
    Ok(rows)
}

pub fn variant_csv(rows: &[VariantRow]) -> String {
    let mut s = String::from("variant,labels,acceptance,epe\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:?},{:?}", r.name, r.labels, r.acceptance, r.epe);
    }
    s
}

// ---------------------------------------------------------------------------
// Persisted stages

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn labels(&self) -> PathBuf {
        self.root.join("labels/labels.txt")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn estimate(&self) -> PathBuf {
        self.root.join("estimate")
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join(format!("manifest-{command}.txt"))
    }
}

fn new_manifest(cfg: &PipelineConfig, command: &str) -> Manifest {
    let mut m = Manifest::new(command, cfg.hash());
    m.seeds.insert("pipeline".into(), cfg.seed);
    m
}

fn finish(layout: &Layout, command: &str, manifest: &Manifest) -> Result<()> {
    io::write_atomic(&layout.manifest(command), manifest.to_text().as_bytes())
}

fn mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let img = image::GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        image::Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::load_from_memory_with_format(&io::read_input(path)?, image::ImageFormat::Png)?.to_luma8();
    Ok(Mask {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.pixels().map(|p| p.0[0] >= 128).collect(),
    })
}

fn rgb8_png(img: &image::RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// `synth`: renders the corpus and writes frames and ground truth.
pub fn run_synth(cfg: &PipelineConfig, layout: &Layout) -> Result<Manifest> {
    let clips = build_corpus(cfg)?;
    let mut m = new_manifest(cfg, "synth");
    m.seeds.insert("corpus".into(), cfg.seed);
    let ids: String = clips.iter().map(|c| format!("{}\n", c.id)).collect();
    m.write_artifact(&layout.root, "corpus/clips.txt", ids.as_bytes())?;
    for c in &clips {
        for (t, f) in c.frames.iter().enumerate() {
            m.write_artifact(&layout.root, &format!("corpus/{}/frame_{t}.png", c.id), &io::encode_png(f)?)?;
        }
        for (t, f) in c.flows.iter().enumerate() {
            m.write_artifact(&layout.root, &format!("corpus/{}/flow_{t}.flo", c.id), &io::encode_flo(f))?;
            m.write_artifact(&layout.root, &format!("corpus/{}/occ_{t}.png", c.id), &mask_png(&c.occlusion[t])?)?;
        }
        m.write_artifact(&layout.root, &format!("corpus/{}/tracks.txt", c.id), io::tracks_to_text(&c.tracks).as_bytes())?;
    }
    finish(layout, "synth", &m)?;
    Ok(m)
}

/// Reads a corpus directory written by `synth` (or laid out the same way).
pub fn load_corpus(dir: &Path) -> Result<Vec<ClipData>> {
    let ids = io::read_text(&dir.join("clips.txt"))?;
    ids.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            let cd = dir.join(id);
            let mut frames = Vec::new();
            while cd.join(format!("frame_{}.png", frames.len())).exists() {
                let t = frames.len();
                frames.push(io::read_png(&cd.join(format!("frame_{t}.png")), t)?);
            }
            if frames.len() < 2 {
                return Err(Error::MissingInput(cd.join("frame_1.png")));
            }
            let mut flows = Vec::new();
            let mut occlusion = Vec::new();
            for t in 0..frames.len() - 1 {
                flows.push(io::read_flo(&cd.join(format!("flow_{t}.flo")))?);
                let occ = cd.join(format!("occ_{t}.png"));
                occlusion.push(if occ.exists() {
                    read_mask_png(&occ)?
                } else {
                    Mask::filled(frames[0].width(), frames[0].height(), false)
                });
            }
            let mut tracks = io::read_tracks(&cd.join("tracks.txt"))?;
            tracks.clip = id.to_string();
            Ok(ClipData {
                id: id.to_string(),
                frames,
                flows,
                occlusion,
                tracks,
            })
        })
        .collect()
}

/// `pseudolabel`: stage one on the persisted corpus.
pub fn run_pseudolabel(cfg: &PipelineConfig, layout: &Layout) -> Result<Manifest> {
    let clips = load_corpus(&layout.corpus())?;
    let labels = pseudolabels(cfg, &reference_model(cfg), &videos(&clips))?;
    let mut m = new_manifest(cfg, "pseudolabel");
    m.seeds.insert("rebalance".into(), cfg.seed);
    m.write_artifact(&layout.root, "labels/labels.txt", labels.to_text()?.as_bytes())?;
    let mut csv = String::from("clip,accepted,total,fraction,densified\n");
    for c in &labels.clips {
        let _ = writeln!(csv, "{},{},{},{:?},{}", c.clip, c.accepted, c.total, c.fraction(), c.densified);
    }
    let _ = writeln!(csv, "all,{},{},{:?},", labels.accepted, labels.total, labels.acceptance_fraction());
    m.write_artifact(&layout.root, "labels/acceptance.csv", csv.as_bytes())?;
    finish(layout, "pseudolabel", &m)?;
    Ok(m)
}

/// `finetune`: stage two from the persisted corpus and labels.
pub fn run_finetune(cfg: &PipelineConfig, layout: &Layout) -> Result<Manifest> {
    let clips = load_corpus(&layout.corpus())?;
    let vids = videos(&clips);
    let labels = if cfg.objective == Objective::PseudoLabel {
        let path = layout.labels();
        Some(PseudoLabelSet::from_text(&io::read_text(&path)?, &path.display().to_string())?)
    } else {
        None
    };
    let base = reference_model(cfg);
    let out = refine(cfg, &cfg.train, cfg.objective, &base, &vids, labels.as_ref())?;
    let mut m = new_manifest(cfg, "finetune");
    m.seeds.insert("train".into(), cfg.seed);
    for (name, model) in out.models.named() {
        m.write_artifact(&layout.root, &format!("models/{name}.model"), model.to_text().as_bytes())?;
    }
    for (name, log) in &out.logs {
        m.write_artifact(&layout.root, &format!("models/{name}.log.csv"), log_to_csv(log).as_bytes())?;
    }
    for (name, cps) in &out.checkpoints {
        for (step, model) in cps {
            m.write_artifact(
                &layout.root,
                &format!("models/checkpoints/{name}.step{step}.model"),
                model.to_text().as_bytes(),
            )?;
        }
    }
    finish(layout, "finetune", &m)?;
    Ok(m)
}

/// Loads fine-tuned models from `dir`; a missing directory means the frozen
/// model.
pub fn load_models(cfg: &PipelineConfig, dir: &Path) -> Result<ModelSet> {
    let mut set = ModelSet::frozen(reference_model(cfg));
    if !dir.exists() {
        return Ok(set);
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        let Some(name) = p.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".model")) else {
            continue;
        };
        let model = ReferenceModel::from_text(&io::read_text(&p)?, &p.display().to_string())?;
        if name == SHARED_MODEL {
            set.shared = Some(model);
        } else {
            set.per_clip.insert(name.to_string(), model);
        }
    }
    Ok(set)
}

/// `estimate`: flows for every pair and tracks for the ground-truth queries.
pub fn run_estimate(cfg: &PipelineConfig, layout: &Layout, frozen: bool) -> Result<Manifest> {
    let clips = load_corpus(&layout.corpus())?;
    let models = if frozen {
        ModelSet::frozen(reference_model(cfg))
    } else {
        load_models(cfg, &layout.models())?
    };
    let flows: Vec<Vec<FlowField>> = clips
        .par_iter()
        .map(|c| {
            let m = models.for_clip(&c.id);
            c.frames.windows(2).map(|w| m.predict_flow(&w[0], &w[1])).collect()
        })
        .collect::<Result<_>>()?;
    let tracks = predict_tracks(&models, &clips)?;
    let mut m = new_manifest(cfg, "estimate");
    let ids: String = clips.iter().map(|c| format!("{}\n", c.id)).collect();
    m.write_artifact(&layout.root, "estimate/clips.txt", ids.as_bytes())?;
    for ((c, fs), ts) in clips.iter().zip(&flows).zip(&tracks) {
        for (t, f) in fs.iter().enumerate() {
            m.write_artifact(&layout.root, &format!("estimate/{}/flow_{t}.flo", c.id), &io::encode_flo(f))?;
        }
        m.write_artifact(&layout.root, &format!("estimate/{}/tracks.txt", c.id), io::tracks_to_text(ts).as_bytes())?;
    }
    finish(layout, "estimate", &m)?;
    Ok(m)
}

/// Scores the predictions in `pred_dir` (estimate layout) against the corpus.
pub fn evaluate_dir(cfg: &PipelineConfig, clips: &[ClipData], pred_dir: &Path) -> Result<(EvalReport, EvalReport)> {
    let flow = pooled_epe(clips, cfg.eval_pairs, |c, t| io::read_flo(&pred_dir.join(&c.id).join(format!("flow_{t}.flo"))))?;
    let mut flow_report = EvalReport::for_flow();
    for (id, e) in &flow.per_clip {
        flow_report.push(id.clone(), vec![Some(*e)])?;
    }
    flow_report.push("all", vec![Some(flow.epe)])?;
    let preds: Vec<TrajectorySet> = clips
        .iter()
        .map(|c| io::read_tracks(&pred_dir.join(&c.id).join("tracks.txt")))
        .collect::<Result<_>>()?;
    let mut track_report = EvalReport::for_tracks();
    track_report.push_tracks("all", &score_tracks(cfg, &preds, clips)?)?;
    Ok((flow_report, track_report))
}

/// `eval`: writes flow and track reports for `pred_dir` (default: estimate/).
pub fn run_eval(cfg: &PipelineConfig, layout: &Layout, pred_dir: Option<&Path>) -> Result<(Manifest, String)> {
    let clips = load_corpus(&layout.corpus())?;
    let dir = pred_dir.map(Path::to_path_buf).unwrap_or_else(|| layout.estimate());
    let (flow, tracks) = evaluate_dir(cfg, &clips, &dir)?;
    let text = format!("flow ({} pairs)\n{}\ntracks\n{}", cfg.eval_pairs, flow.to_table(), tracks.to_table());
    let mut m = new_manifest(cfg, "eval");
    m.write_artifact(&layout.root, "eval/flow.csv", flow.to_csv().as_bytes())?;
    m.write_artifact(&layout.root, "eval/tracks.csv", tracks.to_csv().as_bytes())?;
    m.write_artifact(&layout.root, "eval/report.txt", text.as_bytes())?;
    finish(layout, "eval", &m)?;
    Ok((m, text))
}

/// `viz`: colorwheel images of the flows in `input` (estimate layout) and
/// track overlays on the first corpus frame.
pub fn run_viz(cfg: &PipelineConfig, layout: &Layout, input: Option<&Path>) -> Result<Manifest> {
    let clips = load_corpus(&layout.corpus())?;
    let dir = input.map(Path::to_path_buf).unwrap_or_else(|| layout.estimate());
    let mut m = new_manifest(cfg, "viz");
    for c in &clips {
        for t in 0..c.frames.len() - 1 {
            let flow = io::read_flo(&dir.join(&c.id).join(format!("flow_{t}.flo")))?;
            let img = viz::flow_to_color(&flow, None);
            m.write_artifact(&layout.root, &format!("viz/{}/flow_{t}.png", c.id), &rgb8_png(&img)?)?;
        }
        let tracks = io::read_tracks(&dir.join(&c.id).join("tracks.txt"))?;
        let img = viz::draw_tracks(&c.frames[0], &tracks.trajectories);
        m.write_artifact(&layout.root, &format!("viz/{}/tracks.png", c.id), &rgb8_png(&img)?)?;
    }
    finish(layout, "viz", &m)?;
    Ok(m)
}

/// `ablate`: τ sweep, κ sweep, filter study and objective study on the
/// persisted corpus.
pub fn run_ablate(cfg: &PipelineConfig, layout: &Layout) -> Result<Manifest> {
    let clips = load_corpus(&layout.corpus())?;
    let mut m = new_manifest(cfg, "ablate");
    let mut track_cfg = cfg.clone();
    track_cfg.mode = LabelMode::Track;
    let taus = tau_sweep(&track_cfg, &clips)?;
    m.write_artifact(&layout.root, "ablate/tau.csv", tau_csv(&taus).as_bytes())?;
    let kappas = kappa_sweep(cfg, &clips)?;
    m.write_artifact(&layout.root, "ablate/kappa.csv", kappa_csv(&kappas, cfg.mode).as_bytes())?;
    let filters = filter_study(cfg, &clips)?;
    m.write_artifact(&layout.root, "ablate/filters.csv", variant_csv(&filters).as_bytes())?;
    let objectives = objective_study(
        cfg,
        &clips,
        &[Objective::PseudoLabel, Objective::Color, Objective::ColorSmooth, Objective::ColorEdge],
    )?;
    m.write_artifact(&layout.root, "ablate/objectives.csv", variant_csv(&objectives).as_bytes())?;
    finish(layout, "ablate", &m)?;
    Ok(m)
}

/// `run`: synth, pseudolabel, finetune, estimate and eval in sequence, each
/// reading the previous stage's files.
pub fn run_all(cfg: &PipelineConfig, layout: &Layout) -> Result<String> {
    run_synth(cfg, layout)?;
    if cfg.objective == Objective::PseudoLabel {
        run_pseudolabel(cfg, layout)?;
    }
    run_finetune(cfg, layout)?;
    run_estimate(cfg, layout, false)?;
    let (_, text) = run_eval(cfg, layout, None)?;
    Ok(text)
}
