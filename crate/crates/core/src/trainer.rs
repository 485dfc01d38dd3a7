//! Mean-Teacher training with collaborative perturbations.
//!
//! Every iteration draws a labeled and an unlabeled batch. Labeled images
//! get a weak geometric augmentation and a supervised loss. Each unlabeled
//! image gets one weak augmentation shared by three passes: the teacher
//! (plain), the student with a feature mask, and the student on a strongly
//! augmented copy. The two student predictions are pulled towards the
//! teacher's with a ramped-up weight. The teacher follows the student by EMA.
//!
//! All randomness is a pure function of `(seed, iteration, slot)`, so runs are
//! reproducible, resumable, and independent of the thread count.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{
    sample_weak_params, sample_weak_params_labeled, strong_augment, weak_augment_image, weak_augment_target,
    StrongAugParams, WeakAugParams,
};
use crate::error::{Error, Result};
use crate::geometry::{LayoutTarget, Panorama, RoomLayout};
use crate::losses::{consistency_loss, ramp_weight, supervised_loss, LossTerms, LossWeights, RampSchedule};
use crate::mask::{build_mask, MaskConfig};
use crate::metrics::{evaluate_prediction, MetricsReport};
use crate::model::{optimizer_step, AdamState, Gradients, Model, ParamStore};
use crate::par;
use crate::rng::{stream, Stream};

/// Which unlabeled student branches are perturbed how.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Both branches see the weakly augmented image only.
    None,
    /// Strong augmentation on one branch, no masking.
    ImageOnly,
    /// Strong augmentation on one branch, masking on both.
    NaiveBoth,
    /// Masking on the weak branch, strong augmentation on the other.
    #[default]
    Collaborative,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::None,
        AblationMode::ImageOnly,
        AblationMode::NaiveBoth,
        AblationMode::Collaborative,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::None => "none",
            AblationMode::ImageOnly => "image_only",
            AblationMode::NaiveBoth => "naive_both",
            AblationMode::Collaborative => "collaborative",
        }
    }

    fn strong_branch(self) -> bool {
        self != AblationMode::None
    }

    fn mask_feat(self) -> bool {
        matches!(self, AblationMode::NaiveBoth | AblationMode::Collaborative)
    }

    fn mask_img(self) -> bool {
        self == AblationMode::NaiveBoth
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub ema_decay: f64,
    pub lr: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub total_iters: usize,
    pub ramp: RampSchedule,
    pub ablation_mode: AblationMode,
    pub seed: u64,
    pub eval_interval: usize,
    /// Multiplies the ramp weight; 0 turns the consistency term off.
    pub consistency_scale: f64,
    pub loss: LossWeights,
    pub mask: MaskConfig,
    pub strong: StrongAugParams,
}

impl TrainerConfig {
    pub fn new(total_iters: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            ema_decay: 0.999,
            lr: 1e-4,
            batch_labeled: 4,
            batch_unlabeled: 4,
            total_iters,
            ramp: RampSchedule::from_fraction(total_iters, 0.3)?,
            ablation_mode: AblationMode::Collaborative,
            seed,
            eval_interval: total_iters.clamp(1, 100),
            consistency_scale: 1.0,
            loss: LossWeights::default(),
            mask: MaskConfig::default(),
            strong: StrongAugParams::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::invalid(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::invalid("batch sizes must be >= 1"));
        }
        if self.total_iters == 0 || self.eval_interval == 0 {
            return Err(Error::invalid("total_iters and eval_interval must be >= 1"));
        }
        if self.ramp.rampup_end == 0 || self.ramp.rampup_end > self.total_iters || self.ramp.total_iters != self.total_iters {
            return Err(Error::invalid(format!("ramp-up {:?} does not fit {} iterations", self.ramp, self.total_iters)));
        }
        if !(self.consistency_scale >= 0.0 && self.consistency_scale.is_finite()) {
            return Err(Error::invalid("consistency_scale must be >= 0"));
        }
        self.loss.validate()?;
        self.mask.validate()?;
        self.strong.validate()
    }

    /// Consistency weight at iteration `i`.
    pub fn lambda(&self, i: usize) -> f64 {
        self.consistency_scale * ramp_weight(i, &self.ramp)
    }
}

/// A labeled panorama with its layout and derived target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: Panorama,
    pub layout: RoomLayout,
    pub target: LayoutTarget,
}

/// Borrowed training splits.
#[derive(Clone, Debug, Default)]
pub struct Splits<'a> {
    pub labeled: Vec<&'a Sample>,
    pub unlabeled: Vec<&'a Panorama>,
    pub validation: Vec<&'a Sample>,
}

impl Splits<'_> {
    fn validate(&self) -> Result<()> {
        if self.labeled.is_empty() {
            return Err(Error::invalid("labeled split is empty"));
        }
        if self.validation.is_empty() {
            return Err(Error::invalid("validation split is empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Student,
    Teacher,
}

impl Which {
    pub fn as_str(self) -> &'static str {
        match self {
            Which::Student => "student",
            Which::Teacher => "teacher",
        }
    }
}

/// Best validation result seen so far.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub iteration: usize,
    pub which: Which,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub adam: AdamState,
    pub iteration: usize,
    pub consecutive_bad: usize,
    pub last_eval: Option<usize>,
    pub best: Option<BestRecord>,
    pub best_params: Option<ParamStore>,
}

impl TrainState {
    /// Fresh state; the teacher starts as an exact copy of the student.
    pub fn new(model: &Model, seed: u64) -> Self {
        let student = model.init_params(seed);
        Self {
            teacher: student.clone(),
            adam: AdamState::new(&student),
            student,
            iteration: 0,
            consecutive_bad: 0,
            last_eval: None,
            best: None,
            best_params: None,
        }
    }
}

/// `θ_T ← α·θ_T + (1 − α)·θ_S` for every parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    if !teacher.same_manifest(student) {
        return Err(Error::invalid("teacher and student parameter manifests differ"));
    }
    for (t, s) in teacher.params_mut().iter_mut().zip(student.params()) {
        for (a, b) in t.value.iter_mut().zip(&s.value) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    }
    Ok(())
}

/// Per-iteration diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub lambda: f64,
    pub sup: LossTerms,
    pub con: f64,
    pub total: f64,
    pub skipped: bool,
}

/// Dataset index for batch slot `slot` of iteration `iter`: epochs are
/// seeded shuffles of `0..n`, so lookup needs no sampler state.
fn epoch_index(seed: u64, domain: Stream, n: usize, batch: usize, iter: usize, slot: usize) -> usize {
    let g = iter * batch + slot;
    let (epoch, pos) = (g / n, g % n);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(seed, domain, epoch as u64));
    perm[pos]
}

struct SlotOut {
    value: f64,
    terms: LossTerms,
    grads: Gradients,
}

fn labeled_slot(model: &Model, state: &TrainState, splits: &Splits, cfg: &TrainerConfig, slot: usize) -> Result<SlotOut> {
    let i = state.iteration;
    let w = model.width();
    let idx = epoch_index(cfg.seed, Stream::LabeledBatch, splits.labeled.len(), cfg.batch_labeled, i, slot);
    let sample = splits.labeled[idx];
    let mut rng = stream(cfg.seed, Stream::LabeledAug, (i * cfg.batch_labeled + slot) as u64);
    let p = sample_weak_params_labeled(&mut rng, w);
    let img = weak_augment_image(&sample.image, &p)?;
    let (target, _) = weak_augment_target(&sample.target, &sample.layout, &p)?;
    let (pred, tape) = model.forward(&img, &state.student, None)?;
    let (terms, g) = supervised_loss(&pred, &target, &cfg.loss)?;
    let mut grads = Gradients::zeros_like(&state.student);
    model.backward(&tape, &g, &state.student, &mut grads)?;
    Ok(SlotOut {
        value: terms.total,
        terms,
        grads,
    })
}

/// Weak augmentation parameters for an unlabeled slot. The teacher and both
/// student branches of that slot all use this one instance.
pub fn unlabeled_params(seed: u64, iteration: usize, batch: usize, slot: usize, width: usize) -> WeakAugParams {
    let mut rng = stream(seed, Stream::UnlabeledAug, (iteration * batch + slot) as u64);
    sample_weak_params(&mut rng, width)
}

fn unlabeled_slot(model: &Model, state: &TrainState, splits: &Splits, cfg: &TrainerConfig, slot: usize) -> Result<SlotOut> {
    let i = state.iteration;
    let (c, h, w) = model.feature_shape();
    let idx = epoch_index(cfg.seed, Stream::UnlabeledBatch, splits.unlabeled.len(), cfg.batch_unlabeled, i, slot);
    let p = unlabeled_params(cfg.seed, i, cfg.batch_unlabeled, slot, model.width());
    let weak = weak_augment_image(splits.unlabeled[idx], &p)?;
    let z_tea = model.infer(&weak, &state.teacher, None)?;
    let mode = cfg.ablation_mode;
    let mut mask_rng = stream(cfg.seed, Stream::Mask, (i * cfg.batch_unlabeled + slot) as u64);
    let mut draw = |on: bool| -> Result<_> { on.then(|| build_mask(c, h, w, &cfg.mask, &mut mask_rng)).transpose() };
    let (m_feat, m_img) = (draw(mode.mask_feat())?, draw(mode.mask_img())?);
    let strong = if mode.strong_branch() {
        strong_augment(&weak, &cfg.strong)?
    } else {
        weak.clone()
    };
    let (z_feat, tape_feat) = model.forward(&weak, &state.student, m_feat.as_ref())?;
    let (z_img, tape_img) = model.forward(&strong, &state.student, m_img.as_ref())?;
    let con = consistency_loss(&z_tea, &z_feat, &z_img, &cfg.loss)?;
    let mut grads = Gradients::zeros_like(&state.student);
    model.backward(&tape_feat, &con.grad_feat, &state.student, &mut grads)?;
    model.backward(&tape_img, &con.grad_img, &state.student, &mut grads)?;
    Ok(SlotOut {
        value: con.value,
        terms: LossTerms::default(),
        grads,
    })
}

/// One optimizer step. A non-finite loss or gradient skips the update and
/// the EMA; three in a row abort the run.
pub fn train_iteration(model: &Model, state: &mut TrainState, splits: &Splits, cfg: &TrainerConfig) -> Result<IterationStats> {
    let i = state.iteration;
    let lambda = cfg.lambda(i);
    let sup: Vec<SlotOut> = par::map_range(cfg.batch_labeled, |s| labeled_slot(model, state, splits, cfg, s))
        .into_iter()
        .collect::<Result<_>>()?;
    let con: Vec<SlotOut> = if splits.unlabeled.is_empty() {
        Vec::new()
    } else {
        par::map_range(cfg.batch_unlabeled, |s| unlabeled_slot(model, state, splits, cfg, s))
            .into_iter()
            .collect::<Result<_>>()?
    };

    let bl = cfg.batch_labeled as f64;
    let mut terms = LossTerms::default();
    let mut grads = Gradients::zeros_like(&state.student);
    for s in &sup {
        terms.depth += s.terms.depth / bl;
        terms.height += s.terms.height / bl;
        terms.normal += s.terms.normal / bl;
        terms.gradient += s.terms.gradient / bl;
        terms.total += s.value / bl;
        grads.add_scaled(&s.grads, 1.0 / bl);
    }
    let mut l_con = 0.0;
    if !con.is_empty() {
        let bu = cfg.batch_unlabeled as f64;
        for s in &con {
            l_con += s.value / bu;
        }
        if lambda != 0.0 {
            for s in &con {
                grads.add_scaled(&s.grads, lambda / bu);
            }
        }
    }
    let total = terms.total + lambda * l_con;
    let mut stats = IterationStats {
        iteration: i,
        lambda,
        sup: terms,
        con: l_con,
        total,
        skipped: false,
    };

    state.student.zero_grads();
    state.student.accumulate(&grads, 1.0);
    let stepped = total.is_finite() && optimizer_step(&mut state.student, cfg.lr, &mut state.adam).is_ok();
    state.iteration += 1;
    if stepped {
        state.consecutive_bad = 0;
        ema_update(&mut state.teacher, &state.student, cfg.ema_decay)?;
    } else {
        state.student.zero_grads();
        state.consecutive_bad += 1;
        stats.skipped = true;
        log::warn!("iteration {i}: non-finite loss {total}, update skipped");
        if state.consecutive_bad >= 3 {
            return Err(Error::Numerical(format!(
                "{} consecutive non-finite iterations ending at {i}",
                state.consecutive_bad
            )));
        }
    }
    Ok(stats)
}

/// Mean metrics of `params` over `samples`, without test-time augmentation.
pub fn evaluate(model: &Model, params: &ParamStore, samples: &[&Sample]) -> Result<MetricsReport> {
    let per: Vec<_> = par::map(samples, |s| {
        let pred = model.infer(&s.image, params, None)?;
        evaluate_prediction(&pred, &s.target, model.height()).map_err(|e| Error::Sample {
            sample: s.id,
            reason: e.to_string(),
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(MetricsReport::mean(&per))
}

/// One validation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub lambda: f64,
    /// Mean losses over the iterations since the previous record.
    pub loss_sup: Option<f64>,
    pub loss_con: Option<f64>,
    pub loss_total: Option<f64>,
    pub skipped: usize,
    pub student: MetricsReport,
    pub teacher: MetricsReport,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<HistoryRecord>,
}

impl TrainOutcome {
    pub fn best(&self) -> &BestRecord {
        self.state.best.as_ref().expect("training always evaluates at least once")
    }
}

#[derive(Default)]
struct Window {
    n: usize,
    sup: f64,
    con: f64,
    total: f64,
    skipped: usize,
}

/// Runs training from `state` (fresh or resumed) to `cfg.total_iters`.
/// Both models are evaluated on validation at iteration 0 and every
/// `eval_interval` iterations; the better one is kept as the best snapshot.
/// `on_record` sees each record together with the state right after it.
pub fn run_training(
    model: &Model,
    splits: &Splits,
    cfg: &TrainerConfig,
    mut state: TrainState,
    mut on_record: impl FnMut(&HistoryRecord, &TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    splits.validate()?;
    if !state.student.same_manifest(&state.teacher) {
        return Err(Error::invalid("teacher and student parameter manifests differ"));
    }
    let mut history = Vec::new();
    let mut win = Window::default();
    loop {
        let i = state.iteration;
        if i % cfg.eval_interval == 0 && state.last_eval != Some(i) {
            let student = evaluate(model, &state.student, &splits.validation)?;
            let teacher = evaluate(model, &state.teacher, &splits.validation)?;
            let (which, report, params) = if teacher.better_than(&student) {
                (Which::Teacher, teacher, &state.teacher)
            } else {
                (Which::Student, student, &state.student)
            };
            if state.best.as_ref().is_none_or(|b| report.better_than(&b.report)) {
                state.best = Some(BestRecord {
                    iteration: i,
                    which,
                    report,
                });
                state.best_params = Some(params.clone());
            }
            let mean = |x: f64| (win.n > 0).then(|| x / win.n as f64);
            let rec = HistoryRecord {
                iteration: i,
                lambda: cfg.lambda(i),
                loss_sup: mean(win.sup),
                loss_con: mean(win.con),
                loss_total: mean(win.total),
                skipped: win.skipped,
                student,
                teacher,
            };
            log::info!(
                "iter {i}: student iou3d {:.4} rmse {:.4} | teacher iou3d {:.4} rmse {:.4}",
                student.iou3d,
                student.rmse,
                teacher.iou3d,
                teacher.rmse
            );
            state.last_eval = Some(i);
            win = Window::default();
            on_record(&rec, &state)?;
            history.push(rec);
        }
        if state.iteration >= cfg.total_iters {
            break;
        }
        let stats = train_iteration(model, &mut state, splits, cfg)?;
        if stats.skipped {
            win.skipped += 1;
        } else {
            win.n += 1;
            win.sup += stats.sup.total;
            win.con += stats.con;
            win.total += stats.total;
        }
    }
    Ok(TrainOutcome { state, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Param;

    #[test]
    fn ema_examples() {
        let mut t = ParamStore::new(vec![Param::new("x", vec![1], vec![0.0])]);
        let s = ParamStore::new(vec![Param::new("x", vec![1], vec![1.0])]);
        ema_update(&mut t, &s, 0.999).unwrap();
        assert!((t.get(0)[0] - 0.001).abs() < 1e-15);
        let mut same = s.clone();
        ema_update(&mut same, &s, 0.5).unwrap();
        assert_eq!(same.get(0), s.get(0));
        let other = ParamStore::new(vec![Param::new("y", vec![1], vec![1.0])]);
        assert!(ema_update(&mut t, &other, 0.9).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
        }
        assert!("both".parse::<AblationMode>().is_err());
    }

    #[test]
    fn epoch_sampling_covers_pool() {
        let n = 7;
        let mut seen: Vec<usize> = (0..7).map(|s| epoch_index(3, Stream::LabeledBatch, n, 7, 0, s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainerConfig::new(100, 0).unwrap();
        assert!(c.validate().is_ok());
        assert_eq!(c.ramp.rampup_end, 30);
        c.ema_decay = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainerConfig::new(100, 0).unwrap();
        c.batch_unlabeled = 0;
        assert!(c.validate().is_err());
    }
}
