//! Command implementations behind the CLI.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{AdamState, Model, Param, ParamStore};
use crate::trainer::{
    evaluate, run_training, AblationMode, BestRecord, HistoryRecord, Sample, Splits, TrainState, Which,
};

use super::config::ExperimentConfig;
use super::dataset::{dir_is_nonempty, generate_dataset, load_dataset, make_splits, write_dataset, Dataset, SplitIds};

pub const HISTORY: &str = "history.jsonl";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const CONFIG_TXT: &str = "config.txt";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const ABLATION_CSV: &str = "ablation.csv";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn header(cfg: &ExperimentConfig) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), cfg.seed)
}

/// Generates the configured dataset and writes it to `out`.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<Dataset> {
    cfg.validate()?;
    if dir_is_nonempty(out)? && !force {
        return Err(Error::invalid(format!("{} is not empty; pass --force to overwrite", out.display())));
    }
    let ds = generate_dataset(cfg)?;
    write_dataset(&ds, out, force)?;
    log::info!(
        "wrote {} samples to {} (content hash {})",
        ds.samples.len(),
        out.display(),
        ds.manifest.content_hash
    );
    Ok(ds)
}

fn dataset_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.dataset_dir
        .as_deref()
        .ok_or_else(|| Error::Config("data.dir is not set".into()))
}

/// Loads the dataset named by the config and checks it matches the
/// configured resolution.
pub fn load_for(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = load_dataset(dataset_dir(cfg)?)?;
    check_compatible(cfg, &ds)?;
    Ok(ds)
}

fn check_compatible(cfg: &ExperimentConfig, ds: &Dataset) -> Result<()> {
    let m = &ds.manifest;
    if (m.height, m.width) != (cfg.height, cfg.width) {
        return Err(Error::Config(format!(
            "dataset is {}x{} but config expects {}x{}",
            m.height, m.width, cfg.height, cfg.width
        )));
    }
    Ok(())
}

/// Borrowed split views over a dataset.
pub fn split_views<'a>(ds: &'a Dataset, ids: &SplitIds) -> (Splits<'a>, Vec<&'a Sample>) {
    let s = |v: &[usize]| v.iter().map(|&i| &ds.samples[i]).collect::<Vec<_>>();
    (
        Splits {
            labeled: s(&ids.labeled),
            unlabeled: ids.unlabeled.iter().map(|&i| &ds.samples[i].image).collect(),
            validation: s(&ids.val),
        },
        s(&ids.test),
    )
}

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub history: Vec<HistoryRecord>,
    pub best: BestRecord,
    pub final_student_val: MetricsReport,
    pub final_teacher_val: MetricsReport,
    /// Test metrics of the selected best snapshot.
    pub best_test: MetricsReport,
    pub final_student_test: MetricsReport,
    pub final_teacher_test: MetricsReport,
    pub state: TrainState,
}

/// Trains on an in-memory dataset. `state` resumes a run; `on_record` is
/// called after every validation pass.
pub fn train_in_memory(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    state: Option<TrainState>,
    on_record: impl FnMut(&HistoryRecord, &TrainState) -> Result<()>,
) -> Result<RunResult> {
    cfg.validate()?;
    check_compatible(cfg, ds)?;
    let ids = make_splits(&ds.manifest, cfg)?;
    let (splits, test) = split_views(ds, &ids);
    let model = Model::new(cfg.height, cfg.width)?;
    let tcfg = cfg.trainer_config()?;
    let state = state.unwrap_or_else(|| TrainState::new(&model, cfg.seed));
    let out = run_training(&model, &splits, &tcfg, state, on_record)?;
    let best = *out.best();
    let best_params = out.state.best_params.as_ref().expect("best params exist once evaluated");
    let (val_s, val_t) = match out.history.last() {
        Some(r) if r.iteration == out.state.iteration => (r.student, r.teacher),
        _ => (
            evaluate(&model, &out.state.student, &splits.validation)?,
            evaluate(&model, &out.state.teacher, &splits.validation)?,
        ),
    };
    Ok(RunResult {
        best_test: evaluate(&model, best_params, &test)?,
        final_student_test: evaluate(&model, &out.state.student, &test)?,
        final_teacher_test: evaluate(&model, &out.state.teacher, &test)?,
        final_student_val: val_s,
        final_teacher_val: val_t,
        history: out.history,
        best,
        state: out.state,
    })
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    record: &'a HistoryRecord,
}

#[derive(Serialize, Deserialize)]
struct CheckpointState {
    config_hash: String,
    seed: u64,
    iteration: usize,
    consecutive_bad: usize,
    last_eval: Option<usize>,
    adam_t: u64,
    best: Option<BestRecord>,
}

fn moments_store(like: &ParamStore, m: &[Vec<f64>]) -> ParamStore {
    ParamStore::new(
        like.params()
            .iter()
            .zip(m)
            .map(|(p, v)| Param::new(p.name.clone(), p.shape.clone(), v.clone()))
            .collect(),
    )
}

/// Writes the full training state under `dir`.
pub fn save_checkpoint(dir: &Path, cfg: &ExperimentConfig, state: &TrainState) -> Result<()> {
    create_dir(dir)?;
    state.student.save(&dir.join("student.bin"))?;
    state.teacher.save(&dir.join("teacher.bin"))?;
    if let Some(b) = &state.best_params {
        b.save(&dir.join("best.bin"))?;
    }
    moments_store(&state.student, &state.adam.m).save(&dir.join("adam_m.bin"))?;
    moments_store(&state.student, &state.adam.v).save(&dir.join("adam_v.bin"))?;
    let meta = CheckpointState {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        iteration: state.iteration,
        consecutive_bad: state.consecutive_bad,
        last_eval: state.last_eval,
        adam_t: state.adam.t,
        best: state.best,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_file(&dir.join("state.json"), json)
}

/// Reads a checkpoint written by [`save_checkpoint`]; the config must hash
/// to the same value.
pub fn load_checkpoint(dir: &Path, cfg: &ExperimentConfig) -> Result<TrainState> {
    let path = dir.join("state.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointState =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if meta.config_hash != cfg.hash() {
        return Err(Error::Config(format!(
            "checkpoint was written with config {} but the current config hashes to {}",
            meta.config_hash,
            cfg.hash()
        )));
    }
    let student = ParamStore::load(&dir.join("student.bin"))?;
    let teacher = ParamStore::load(&dir.join("teacher.bin"))?;
    let best_path = dir.join("best.bin");
    let best_params = if best_path.exists() {
        Some(ParamStore::load(&best_path)?)
    } else {
        None
    };
    let m = ParamStore::load(&dir.join("adam_m.bin"))?;
    let v = ParamStore::load(&dir.join("adam_v.bin"))?;
    if !m.same_manifest(&student) || !v.same_manifest(&student) || !teacher.same_manifest(&student) {
        return Err(Error::Checkpoint(format!("{}: tensor manifests disagree", dir.display())));
    }
    let grab = |s: &ParamStore| s.params().iter().map(|p| p.value.clone()).collect();
    Ok(TrainState {
        adam: AdamState {
            m: grab(&m),
            v: grab(&v),
            t: meta.adam_t,
        },
        student,
        teacher,
        iteration: meta.iteration,
        consecutive_bad: meta.consecutive_bad,
        last_eval: meta.last_eval,
        best: meta.best,
        best_params,
    })
}

fn csv_row(out: &mut String, cfg: &ExperimentConfig, model: &str, split: &str, r: &MetricsReport) {
    let _ = writeln!(
        out,
        "{},{},{model},{split},{},{},{},{},{},{},{}",
        cfg.hash(),
        cfg.seed,
        r.iou2d,
        r.iou3d,
        r.corner_error_pct,
        r.pixel_error_pct,
        r.rmse,
        r.delta1,
        r.n_samples
    );
}

fn summary_text(cfg: &ExperimentConfig, res: &RunResult) -> (String, String) {
    let mut txt = header(cfg);
    let line = |t: &mut String, name: &str, r: &MetricsReport| {
        let _ = writeln!(
            t,
            "{name:<14} iou3d={:.4} iou2d={:.4} ce={:.3} pe={:.3} rmse={:.4} delta1={:.4} n={}",
            r.iou3d, r.iou2d, r.corner_error_pct, r.pixel_error_pct, r.rmse, r.delta1, r.n_samples
        );
    };
    let _ = writeln!(txt, "iterations = {}", res.state.iteration);
    let _ = writeln!(txt, "ablation_mode = {}", cfg.ablation_mode);
    let _ = writeln!(txt, "best_iteration = {}", res.best.iteration);
    let _ = writeln!(txt, "best_model = {}", res.best.which.as_str());
    line(&mut txt, "val.student", &res.final_student_val);
    line(&mut txt, "val.teacher", &res.final_teacher_val);
    line(&mut txt, "val.best", &res.best.report);
    line(&mut txt, "test.student", &res.final_student_test);
    line(&mut txt, "test.teacher", &res.final_teacher_test);
    line(&mut txt, "test.best", &res.best_test);
    let mut csv = String::from("config_hash,seed,model,split,iou2d,iou3d,corner_error_pct,pixel_error_pct,rmse,delta1,n_samples\n");
    csv_row(&mut csv, cfg, "student", "val", &res.final_student_val);
    csv_row(&mut csv, cfg, "teacher", "val", &res.final_teacher_val);
    csv_row(&mut csv, cfg, "best", "val", &res.best.report);
    csv_row(&mut csv, cfg, "student", "test", &res.final_student_test);
    csv_row(&mut csv, cfg, "teacher", "test", &res.final_teacher_test);
    csv_row(&mut csv, cfg, "best", "test", &res.best_test);
    (txt, csv)
}

/// Trains with the dataset named in `cfg`, writing history, summaries and
/// checkpoints to `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: bool, force: bool) -> Result<RunResult> {
    cfg.validate()?;
    let ds = load_for(cfg)?;
    train_to_dir(cfg, &ds, out, resume, force)
}

/// [`cmd_train`] with an already loaded dataset.
pub fn train_to_dir(cfg: &ExperimentConfig, ds: &Dataset, out: &Path, resume: bool, force: bool) -> Result<RunResult> {
    let ckpt = out.join(CHECKPOINT_DIR);
    let history_path = out.join(HISTORY);
    let (state, history) = if resume {
        if !ckpt.join("state.json").exists() {
            return Err(Error::invalid(format!("--resume given but {} has no checkpoint", out.display())));
        }
        let state = load_checkpoint(&ckpt, cfg)?;
        let text = std::fs::read_to_string(&history_path).map_err(|e| Error::io(&history_path, e))?;
        let keep = state.last_eval.map_or(0, |i| i + 1);
        let mut kept = String::new();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", history_path.display())))?;
            if v["iteration"].as_u64().is_some_and(|i| (i as usize) < keep) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        (Some(state), kept)
    } else {
        if dir_is_nonempty(out)? && !force {
            return Err(Error::invalid(format!("{} is not empty; pass --force or --resume", out.display())));
        }
        if out.exists() && force {
            std::fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
        (None, String::new())
    };
    create_dir(out)?;
    write_file(&out.join(CONFIG_TXT), header(cfg) + &cfg.render())?;
    write_file(&history_path, &history)?;
    let hash = cfg.hash();
    let res = train_in_memory(cfg, ds, state, |rec, st| {
        let line = serde_json::to_string(&HistoryLine {
            config_hash: &hash,
            seed: cfg.seed,
            record: rec,
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&history_path)
            .map_err(|e| Error::io(&history_path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&history_path, e))?;
        save_checkpoint(&ckpt, cfg, st)
    })?;
    let (txt, csv) = summary_text(cfg, &res);
    write_file(&out.join(SUMMARY_TXT), txt)?;
    write_file(&out.join(SUMMARY_CSV), csv)?;
    Ok(res)
}

/// Student, teacher and better-of-two metrics for one split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: SplitName,
    pub student: MetricsReport,
    pub teacher: MetricsReport,
    pub better: Which,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Labeled,
    Unlabeled,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(SplitName::Labeled),
            "unlabeled" => Ok(SplitName::Unlabeled),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::invalid(format!(
                "unknown split {s:?} (expected labeled, unlabeled, val or test)"
            ))),
        }
    }
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Labeled => "labeled",
            SplitName::Unlabeled => "unlabeled",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

/// Evaluates the student and teacher weights of the checkpoint in `run`
/// on one split and writes `eval_<split>.txt` next to it.
pub fn cmd_evaluate(cfg: &ExperimentConfig, run: &Path, split: SplitName) -> Result<EvalReport> {
    cfg.validate()?;
    let ckpt = run.join(CHECKPOINT_DIR);
    for f in ["student.bin", "teacher.bin"] {
        if !ckpt.join(f).is_file() {
            return Err(Error::Checkpoint(format!("missing checkpoint file {}", ckpt.join(f).display())));
        }
    }
    let student = ParamStore::load(&ckpt.join("student.bin"))?;
    let teacher = ParamStore::load(&ckpt.join("teacher.bin"))?;
    let ds = load_for(cfg)?;
    let ids = make_splits(&ds.manifest, cfg)?;
    let pick = match split {
        SplitName::Labeled => &ids.labeled,
        SplitName::Unlabeled => &ids.unlabeled,
        SplitName::Val => &ids.val,
        SplitName::Test => &ids.test,
    };
    let samples: Vec<&Sample> = pick.iter().map(|&i| &ds.samples[i]).collect();
    if samples.is_empty() {
        return Err(Error::invalid(format!("split {} is empty", split.as_str())));
    }
    let model = Model::new(cfg.height, cfg.width)?;
    let s = evaluate(&model, &student, &samples)?;
    let t = evaluate(&model, &teacher, &samples)?;
    let report = EvalReport {
        split,
        student: s,
        teacher: t,
        better: if t.better_than(&s) { Which::Teacher } else { Which::Student },
    };
    let mut txt = header(cfg);
    let _ = writeln!(txt, "split = {}", split.as_str());
    for (name, r) in [("student", &s), ("teacher", &t)] {
        let _ = writeln!(
            txt,
            "{name} iou3d={} iou2d={} ce={} pe={} rmse={} delta1={} n={}",
            r.iou3d, r.iou2d, r.corner_error_pct, r.pixel_error_pct, r.rmse, r.delta1, r.n_samples
        );
    }
    let _ = writeln!(txt, "better = {}", report.better.as_str());
    write_file(&run.join(format!("eval_{}.txt", split.as_str())), txt)?;
    Ok(report)
}

/// One ablation row: best-snapshot test metrics of a mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub test: MetricsReport,
}

pub fn ablation_csv(cfg: &ExperimentConfig, rows: &[AblationRow]) -> String {
    let mut out = header(cfg);
    out.push_str("mode,iou3d,iou2d,corner_error_pct,pixel_error_pct\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.mode, r.test.iou3d, r.test.iou2d, r.test.corner_error_pct, r.test.pixel_error_pct
        );
    }
    out
}

/// Trains all four perturbation modes with shared seeds into `out/<mode>`
/// and writes the comparison table.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if dir_is_nonempty(out)? && !force {
        return Err(Error::invalid(format!("{} is not empty; pass --force to overwrite", out.display())));
    }
    let ds = load_for(cfg)?;
    let mut rows = Vec::new();
    for mode in AblationMode::ALL {
        let mut c = cfg.clone();
        c.ablation_mode = mode;
        log::info!("ablation: training mode {mode}");
        let dir: PathBuf = out.join(mode.as_str());
        let res = train_to_dir(&c, &ds, &dir, false, true)?;
        rows.push(AblationRow {
            mode,
            test: res.best_test,
        });
    }
    create_dir(out)?;
    write_file(&out.join(ABLATION_CSV), ablation_csv(cfg, &rows))?;
    Ok(rows)
}
