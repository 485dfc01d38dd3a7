//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::augment::StrongAugParams;
use crate::error::{Error, Result};
use crate::geometry::GenConfig;
use crate::losses::{LossWeights, RampSchedule};
use crate::mask::MaskConfig;
use crate::model::Model;
use crate::trainer::{AblationMode, TrainerConfig};

/// Every knob of an experiment. Defaults match the desk-scale setup.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub dataset_dir: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub n_samples: usize,
    pub gen: GenConfig,
    pub n_val: usize,
    pub n_test: usize,
    pub label_budget: usize,
    /// Cap on the unlabeled pool; `None` uses the whole remainder.
    pub n_unlabeled: Option<usize>,
    pub supervised_only: bool,
    pub strong: StrongAugParams,
    pub mask: MaskConfig,
    pub loss: LossWeights,
    pub ema_decay: f64,
    pub lr: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub total_iters: usize,
    pub rampup_fraction: f64,
    pub ablation_mode: AblationMode,
    pub eval_interval: usize,
    pub consistency_scale: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            dataset_dir: None,
            height: 64,
            width: 128,
            noise_sigma: 0.01,
            n_samples: 650,
            gen: GenConfig::default(),
            n_val: 50,
            n_test: 100,
            label_budget: 20,
            n_unlabeled: None,
            supervised_only: false,
            strong: StrongAugParams::default(),
            mask: MaskConfig::default(),
            loss: LossWeights::default(),
            ema_decay: 0.99,
            lr: 1e-3,
            batch_labeled: 4,
            batch_unlabeled: 4,
            total_iters: 3000,
            rampup_fraction: 0.3,
            ablation_mode: AblationMode::Collaborative,
            eval_interval: 250,
            consistency_scale: 1.0,
        }
    }
}

/// Key, description. The order here is the order of [`ExperimentConfig::render`].
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "training seed (initialisation, batches, augmentation, masks)"),
    ("data.seed", "dataset generation seed"),
    ("data.dir", "dataset directory"),
    ("data.height", "panorama height in pixels, multiple of 8"),
    ("data.width", "panorama width in pixels, multiple of 8"),
    ("data.noise_sigma", "render noise standard deviation"),
    ("data.samples", "number of generated samples"),
    ("gen.min_size", "smallest room extent in metres"),
    ("gen.max_size", "largest room extent in metres"),
    ("gen.min_room_height", "lowest ceiling in metres"),
    ("gen.max_room_height", "highest ceiling in metres"),
    ("gen.camera_height", "camera height in metres"),
    ("gen.l_shape_prob", "probability of an L-shaped room"),
    ("gen.camera_margin", "minimum camera distance from any wall in metres"),
    ("split.val", "validation samples"),
    ("split.test", "test samples"),
    ("split.labeled", "label budget taken from the training pool"),
    ("split.unlabeled", "unlabeled samples used, or \"all\""),
    ("train.supervised_only", "ignore unlabeled data"),
    ("aug.hist_eq", "histogram equalisation in the strong pipeline"),
    ("aug.hp_cutoff", "high-pass cutoff as a fraction of the corner radius, (0, 1]"),
    ("aug.hp_floor", "high-pass gain kept at DC, [0, 1]"),
    ("aug.hp_blend", "weight of the filtered image, [0, 1]"),
    ("mask.p_center", "drop probability at the vertical centre"),
    ("mask.p_edge", "drop probability at the top and bottom rows"),
    ("mask.p_channel", "fraction of channels masked"),
    ("loss.w_d", "horizon depth weight"),
    ("loss.w_h", "room height weight"),
    ("loss.w_ng", "normal and gradient weight"),
    ("train.ema_decay", "teacher EMA decay, [0, 1]"),
    ("train.lr", "Adam learning rate"),
    ("train.batch_labeled", "labeled images per iteration"),
    ("train.batch_unlabeled", "unlabeled images per iteration"),
    ("train.total_iters", "optimizer steps"),
    ("train.rampup_fraction", "ramp-up length as a fraction of total_iters, (0, 1]"),
    ("train.ablation_mode", "none | image_only | naive_both | collaborative"),
    ("train.eval_interval", "iterations between validation passes"),
    ("train.consistency_scale", "multiplier on the ramp weight, >= 0"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown or repeated
    /// keys are errors. Missing keys keep their defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), n + 1).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.seed" => self.data_seed = parse(key, v)?,
            "data.dir" => self.dataset_dir = Some(PathBuf::from(v)),
            "data.height" => self.height = parse(key, v)?,
            "data.width" => self.width = parse(key, v)?,
            "data.noise_sigma" => self.noise_sigma = parse(key, v)?,
            "data.samples" => self.n_samples = parse(key, v)?,
            "gen.min_size" => self.gen.min_size = parse(key, v)?,
            "gen.max_size" => self.gen.max_size = parse(key, v)?,
            "gen.min_room_height" => self.gen.min_room_height = parse(key, v)?,
            "gen.max_room_height" => self.gen.max_room_height = parse(key, v)?,
            "gen.camera_height" => self.gen.camera_height = parse(key, v)?,
            "gen.l_shape_prob" => self.gen.l_shape_prob = parse(key, v)?,
            "gen.camera_margin" => self.gen.camera_margin = parse(key, v)?,
            "split.val" => self.n_val = parse(key, v)?,
            "split.test" => self.n_test = parse(key, v)?,
            "split.labeled" => self.label_budget = parse(key, v)?,
            "split.unlabeled" => self.n_unlabeled = if v == "all" { None } else { Some(parse(key, v)?) },
            "train.supervised_only" => self.supervised_only = parse(key, v)?,
            "aug.hist_eq" => self.strong.hist_eq = parse(key, v)?,
            "aug.hp_cutoff" => self.strong.hp_cutoff = parse(key, v)?,
            "aug.hp_floor" => self.strong.hp_floor = parse(key, v)?,
            "aug.hp_blend" => self.strong.hp_blend = parse(key, v)?,
            "mask.p_center" => self.mask.p_center = parse(key, v)?,
            "mask.p_edge" => self.mask.p_edge = parse(key, v)?,
            "mask.p_channel" => self.mask.p_channel = parse(key, v)?,
            "loss.w_d" => self.loss.depth = parse(key, v)?,
            "loss.w_h" => self.loss.height = parse(key, v)?,
            "loss.w_ng" => self.loss.normal_grad = parse(key, v)?,
            "train.ema_decay" => self.ema_decay = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.batch_labeled" => self.batch_labeled = parse(key, v)?,
            "train.batch_unlabeled" => self.batch_unlabeled = parse(key, v)?,
            "train.total_iters" => self.total_iters = parse(key, v)?,
            "train.rampup_fraction" => self.rampup_fraction = parse(key, v)?,
            "train.ablation_mode" => self.ablation_mode = v.parse()?,
            "train.eval_interval" => self.eval_interval = parse(key, v)?,
            "train.consistency_scale" => self.consistency_scale = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        Model::new(self.height, self.width).map_err(cfg_err)?;
        if self.width % 4 != 0 {
            return Err(Error::Config(format!("data.width {} must be a multiple of 4", self.width)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma <= 1.0) {
            return Err(Error::Config(format!("data.noise_sigma {} outside [0, 1]", self.noise_sigma)));
        }
        self.gen.validate()?;
        if self.label_budget == 0 {
            return Err(Error::Config("split.labeled must be >= 1".into()));
        }
        if self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("split.val and split.test must be >= 1".into()));
        }
        if self.n_val + self.n_test + self.label_budget > self.n_samples {
            return Err(Error::Config(format!(
                "label budget {} plus {} val and {} test exceeds {} samples",
                self.label_budget, self.n_val, self.n_test, self.n_samples
            )));
        }
        self.trainer_config().and_then(|t| t.validate()).map_err(cfg_err)
    }

    pub fn trainer_config(&self) -> Result<TrainerConfig> {
        Ok(TrainerConfig {
            ema_decay: self.ema_decay,
            lr: self.lr,
            batch_labeled: self.batch_labeled,
            batch_unlabeled: self.batch_unlabeled,
            total_iters: self.total_iters,
            ramp: RampSchedule::from_fraction(self.total_iters, self.rampup_fraction)?,
            ablation_mode: self.ablation_mode,
            seed: self.seed,
            eval_interval: self.eval_interval,
            consistency_scale: self.consistency_scale,
            loss: self.loss,
            mask: self.mask,
            strong: self.strong,
        })
    }

    fn value(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "data.seed" => self.data_seed.to_string(),
            "data.dir" => self.dataset_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "data.height" => self.height.to_string(),
            "data.width" => self.width.to_string(),
            "data.noise_sigma" => self.noise_sigma.to_string(),
            "data.samples" => self.n_samples.to_string(),
            "gen.min_size" => self.gen.min_size.to_string(),
            "gen.max_size" => self.gen.max_size.to_string(),
            "gen.min_room_height" => self.gen.min_room_height.to_string(),
            "gen.max_room_height" => self.gen.max_room_height.to_string(),
            "gen.camera_height" => self.gen.camera_height.to_string(),
            "gen.l_shape_prob" => self.gen.l_shape_prob.to_string(),
            "gen.camera_margin" => self.gen.camera_margin.to_string(),
            "split.val" => self.n_val.to_string(),
            "split.test" => self.n_test.to_string(),
            "split.labeled" => self.label_budget.to_string(),
            "split.unlabeled" => self.n_unlabeled.map_or("all".into(), |n| n.to_string()),
            "train.supervised_only" => self.supervised_only.to_string(),
            "aug.hist_eq" => self.strong.hist_eq.to_string(),
            "aug.hp_cutoff" => self.strong.hp_cutoff.to_string(),
            "aug.hp_floor" => self.strong.hp_floor.to_string(),
            "aug.hp_blend" => self.strong.hp_blend.to_string(),
            "mask.p_center" => self.mask.p_center.to_string(),
            "mask.p_edge" => self.mask.p_edge.to_string(),
            "mask.p_channel" => self.mask.p_channel.to_string(),
            "loss.w_d" => self.loss.depth.to_string(),
            "loss.w_h" => self.loss.height.to_string(),
            "loss.w_ng" => self.loss.normal_grad.to_string(),
            "train.ema_decay" => self.ema_decay.to_string(),
            "train.lr" => self.lr.to_string(),
            "train.batch_labeled" => self.batch_labeled.to_string(),
            "train.batch_unlabeled" => self.batch_unlabeled.to_string(),
            "train.total_iters" => self.total_iters.to_string(),
            "train.rampup_fraction" => self.rampup_fraction.to_string(),
            "train.ablation_mode" => self.ablation_mode.to_string(),
            "train.eval_interval" => self.eval_interval.to_string(),
            "train.consistency_scale" => self.consistency_scale.to_string(),
            _ => unreachable!("key table and accessor disagree on {key}"),
        }
    }

    /// Full config as parseable text, one documented key per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, doc) in KEYS {
            let _ = writeln!(out, "# {doc}");
            let _ = writeln!(out, "{k} = {}", self.value(k));
        }
        out
    }

    /// Short hash of every setting that influences results. The dataset
    /// directory is excluded so a moved dataset gives the same hash.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, _) in KEYS.iter().filter(|(k, _)| *k != "data.dir") {
            h.update(format!("{k}={}\n", self.value(k)));
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Hash of the settings that determine the generated dataset.
    pub fn generator_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, _) in KEYS.iter().filter(|(k, _)| k.starts_with("gen.") || (k.starts_with("data.") && *k != "data.dir")) {
            h.update(format!("{k}={}\n", self.value(k)));
        }
        hex::encode(&h.finalize()[..8])
    }
}
