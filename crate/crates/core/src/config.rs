//! Flat `key=value` pipeline configuration.
//!
//! The first non-comment line must be `schema=1`. Unknown or repeated keys are
//! errors. Keys not given keep their defaults.

use std::fmt::Display;
use std::str::FromStr;

use crate::consistency::{FilterConfig, LabelMode};
use crate::error::{Error, Result};
use crate::finetune::{Objective, TrainConfig, VideoMode};
use crate::io::sha256_hex;
use crate::metrics::{AteNorm, SURVIVAL_THRESHOLD};
use crate::models::LkConfig;
use crate::synthgen::{CorpusConfig, ShiftKind};

pub const SCHEMA: u32 = 1;

/// Which frame pairs the flow evaluation scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalPairs {
    /// Pairs `(t, t + 1)` with odd `t`, which never produce labels at stride 2.
    HeldOut,
    All,
}

impl FromStr for EvalPairs {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "held-out" => Ok(EvalPairs::HeldOut),
            "all" => Ok(EvalPairs::All),
            other => Err(Error::Unknown {
                what: "evaluation pairs",
                value: other.to_string(),
            }),
        }
    }
}

impl std::fmt::Display for EvalPairs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalPairs::HeldOut => "held-out",
            EvalPairs::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub shift_kind: ShiftKind,
    pub shift_magnitude: f64,
    pub lk: LkConfig,
    pub head_steps: usize,
    pub filter: FilterConfig,
    pub mode: LabelMode,
    pub objective: Objective,
    /// `train.seed` is ignored; runs derive it from `seed`.
    pub train: TrainConfig,
    pub eval_pairs: EvalPairs,
    pub ate_norm: AteNorm,
    pub survival_threshold: f64,
    pub ablate_taus: Vec<f64>,
    pub ablate_kappas: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            corpus: CorpusConfig::default(),
            shift_kind: ShiftKind::BrightnessScale,
            shift_magnitude: 1.0,
            lk: LkConfig::default(),
            head_steps: 3,
            filter: FilterConfig::default(),
            mode: LabelMode::Flow,
            objective: Objective::PseudoLabel,
            train: TrainConfig {
                kappa: 200,
                mode: VideoMode::Single,
                ..TrainConfig::default()
            },
            eval_pairs: EvalPairs::HeldOut,
            ate_norm: AteNorm::ValidCount,
            survival_threshold: SURVIVAL_THRESHOLD,
            ablate_taus: vec![0.5, 1.0, 2.5, 5.0, 10.0],
            ablate_kappas: vec![0, 50, 100, 200, 400],
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{v}` for {key}")))
}

fn pair<T: FromStr>(key: &str, v: &str) -> Result<(T, T)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::InvalidArgument(format!("{key} expects `min,max`")))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn show_pair<T: std::fmt::Debug>(p: &(T, T)) -> String {
    format!("{:?},{:?}", p.0, p.1)
}

fn show_list<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn show(v: impl Display) -> String {
    v.to_string()
}

impl PipelineConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.corpus;
        let f = &self.filter;
        let t = &self.train;
        let a = &t.augmentation;
        vec![
            ("seed", show(self.seed)),
            ("corpus.clips", show(c.clips)),
            ("corpus.width", show(c.width)),
            ("corpus.height", show(c.height)),
            ("corpus.sprites", show_pair(&(c.sprites_min, c.sprites_max))),
            ("corpus.noise", format!("{:?}", c.noise)),
            ("corpus.drift", format!("{:?}", c.drift_max)),
            ("corpus.amplitude", format!("{:?}", c.texture.amplitude)),
            ("corpus.contrast_floor", format!("{:?}", c.texture.contrast_floor)),
            ("shift.kind", show(self.shift_kind)),
            ("shift.magnitude", format!("{:?}", self.shift_magnitude)),
            ("lk.levels", show(self.lk.levels)),
            ("lk.radius", show(self.lk.radius)),
            ("lk.iterations", show(self.lk.iterations)),
            ("lk.min_eigen", format!("{:?}", self.lk.min_eigen)),
            ("head.steps", show(self.head_steps)),
            ("filter.alpha", format!("{:?}", f.alpha)),
            ("filter.beta", format!("{:?}", f.beta)),
            ("filter.gamma", format!("{:?}", f.gamma)),
            ("filter.tau", format!("{:?}", f.tau)),
            ("filter.stride", show(f.stride)),
            ("filter.cycle", show(f.use_cycle)),
            ("filter.color", show(f.use_color)),
            ("filter.rebalance", show(f.rebalance)),
            ("filter.bins", show(f.bins)),
            ("filter.flow_spacing", show(f.flow_spacing)),
            ("filter.track_spacing", show(f.track_spacing)),
            ("filter.densify", show(f.densify)),
            ("filter.densify_below", format!("{:?}", f.densify_below)),
            ("mode", show(self.mode)),
            ("objective", show(self.objective)),
            ("train.videos", show(t.mode)),
            ("train.kappa", show(t.kappa)),
            ("train.batch_size", show(t.batch_size)),
            ("train.accumulation", show(t.accumulation)),
            ("train.lr", format!("{:?}", t.lr)),
            ("train.discount", format!("{:?}", t.discount)),
            ("train.pool", show(t.pool)),
            ("train.smooth_weight", format!("{:?}", t.smooth_weight)),
            ("train.edge_lambda", format!("{:?}", t.edge_lambda)),
            ("train.patch", show(t.patch)),
            ("train.checkpoint_every", show(t.checkpoint_every)),
            ("aug.brightness", show_pair(&a.brightness)),
            ("aug.contrast", show_pair(&a.contrast)),
            ("aug.crop", show_pair(&a.crop)),
            ("aug.scale", show_pair(&a.scale)),
            ("aug.occluders", show_pair(&a.occluders)),
            ("aug.occluder_size", show_pair(&a.occluder_size)),
            ("aug.hflip", format!("{:?}", a.hflip)),
            ("aug.vflip", format!("{:?}", a.vflip)),
            ("eval.pairs", show(self.eval_pairs)),
            (
                "eval.ate_norm",
                match self.ate_norm {
                    AteNorm::ValidCount => "valid".into(),
                    AteNorm::Literal => "literal".into(),
                },
            ),
            ("eval.survival_threshold", format!("{:?}", self.survival_threshold)),
            ("ablate.taus", show_list(&self.ablate_taus)),
            ("ablate.kappas", show_list(&self.ablate_kappas)),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let c = &mut self.corpus;
        let f = &mut self.filter;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "corpus.clips" => c.clips = parse(key, v)?,
            "corpus.width" => c.width = parse(key, v)?,
            "corpus.height" => c.height = parse(key, v)?,
            "corpus.sprites" => (c.sprites_min, c.sprites_max) = pair(key, v)?,
            "corpus.noise" => c.noise = parse(key, v)?,
            "corpus.drift" => c.drift_max = parse(key, v)?,
            "corpus.amplitude" => c.texture.amplitude = parse(key, v)?,
            "corpus.contrast_floor" => c.texture.contrast_floor = parse(key, v)?,
            "shift.kind" => self.shift_kind = v.parse()?,
            "shift.magnitude" => self.shift_magnitude = parse(key, v)?,
            "lk.levels" => self.lk.levels = parse(key, v)?,
            "lk.radius" => self.lk.radius = parse(key, v)?,
            "lk.iterations" => self.lk.iterations = parse(key, v)?,
            "lk.min_eigen" => self.lk.min_eigen = parse(key, v)?,
            "head.steps" => self.head_steps = parse(key, v)?,
            "filter.alpha" => f.alpha = parse(key, v)?,
            "filter.beta" => f.beta = parse(key, v)?,
            "filter.gamma" => f.gamma = parse(key, v)?,
            "filter.tau" => f.tau = parse(key, v)?,
            "filter.stride" => f.stride = parse(key, v)?,
            "filter.cycle" => f.use_cycle = parse(key, v)?,
            "filter.color" => f.use_color = parse(key, v)?,
            "filter.rebalance" => f.rebalance = parse(key, v)?,
            "filter.bins" => f.bins = parse(key, v)?,
            "filter.flow_spacing" => f.flow_spacing = parse(key, v)?,
            "filter.track_spacing" => f.track_spacing = parse(key, v)?,
            "filter.densify" => f.densify = parse(key, v)?,
            "filter.densify_below" => f.densify_below = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "objective" => self.objective = v.parse()?,
            "train.videos" => t.mode = v.parse()?,
            "train.kappa" => t.kappa = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.accumulation" => t.accumulation = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.discount" => t.discount = parse(key, v)?,
            "train.pool" => t.pool = parse(key, v)?,
            "train.smooth_weight" => t.smooth_weight = parse(key, v)?,
            "train.edge_lambda" => t.edge_lambda = parse(key, v)?,
            "train.patch" => t.patch = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "aug.brightness" => t.augmentation.brightness = pair(key, v)?,
            "aug.contrast" => t.augmentation.contrast = pair(key, v)?,
            "aug.crop" => t.augmentation.crop = pair(key, v)?,
            "aug.scale" => t.augmentation.scale = pair(key, v)?,
            "aug.occluders" => t.augmentation.occluders = pair(key, v)?,
            "aug.occluder_size" => t.augmentation.occluder_size = pair(key, v)?,
            "aug.hflip" => t.augmentation.hflip = parse(key, v)?,
            "aug.vflip" => t.augmentation.vflip = parse(key, v)?,
            "eval.pairs" => self.eval_pairs = v.parse()?,
            "eval.ate_norm" => {
                self.ate_norm = match v {
                    "valid" => AteNorm::ValidCount,
                    "literal" => AteNorm::Literal,
                    other => {
                        return Err(Error::Unknown {
                            what: "ATE normalization",
                            value: other.to_string(),
                        })
                    }
                }
            }
            "eval.survival_threshold" => self.survival_threshold = parse(key, v)?,
            "ablate.taus" => self.ablate_taus = list(key, v)?,
            "ablate.kappas" => self.ablate_kappas = list(key, v)?,
            other => {
                return Err(Error::Unknown {
                    what: "config key",
                    value: other.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.train.validate()?;
        let (lo, hi) = self.shift_kind.safe_range();
        if !(lo..=hi).contains(&self.shift_magnitude) {
            return Err(Error::InvalidArgument(format!("shift.magnitude outside [{lo}, {hi}]")));
        }
        if self.corpus.clips == 0 || self.corpus.width < 16 || self.corpus.height < 16 {
            return Err(Error::InvalidArgument("corpus needs at least one clip of 16x16 or more".into()));
        }
        if self.lk.levels == 0 {
            return Err(Error::InvalidArgument("lk.levels must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("schema={SCHEMA}\n");
        for (k, v) in self.entries() {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Digest of the canonical text; equal for configs that differ only in
    /// layout, comments or omitted defaults.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut schema = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, i + 1, "expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            if schema.is_none() {
                if k != "schema" {
                    return Err(Error::parse(origin, i + 1, "first entry must be schema=1"));
                }
                let n: u32 = v.parse().map_err(|_| Error::parse(origin, i + 1, "bad schema version"))?;
                if n != SCHEMA {
                    return Err(Error::parse(origin, i + 1, format!("unsupported schema {n}")));
                }
                schema = Some(n);
                continue;
            }
            if !seen.insert(k.to_string()) {
                return Err(Error::parse(origin, i + 1, format!("duplicate key {k}")));
            }
            cfg.set(k, v).map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        }
        if schema.is_none() {
            return Err(Error::parse(origin, 0, "missing schema line"));
        }
        cfg.validate().map_err(|e| Error::parse(origin, 0, e.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut c = PipelineConfig::default();
        c.filter.tau = 5.0;
        c.ablate_kappas = vec![0, 10];
        c.train.augmentation.scale = (1.0, 1.25);
        let back = PipelineConfig::from_text(&c.to_text(), "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_files_keep_defaults() {
        let c = PipelineConfig::from_text("# sweep\nschema=1\nfilter.tau = 1.0\n", "mem").unwrap();
        assert_eq!(c.filter.tau, 1.0);
        assert_eq!(c.corpus, PipelineConfig::default().corpus);
    }

    #[test]
    fn schema_violations_are_errors() {
        assert!(PipelineConfig::from_text("seed=1\n", "mem").is_err());
        assert!(PipelineConfig::from_text("schema=2\n", "mem").is_err());
        assert!(PipelineConfig::from_text("schema=1\nfilter.tua=1\n", "mem").is_err());
        assert!(PipelineConfig::from_text("schema=1\nseed=1\nseed=2\n", "mem").is_err());
        assert!(PipelineConfig::from_text("schema=1\nfilter.alpha=-1\n", "mem").is_err());
        assert!(PipelineConfig::from_text("schema=1\nmode=dense\n", "mem").is_err());
    }
}
