//! Command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use panolayout::experiments::{self, verify, ExperimentConfig, SplitName};
use panolayout::Error;

#[derive(Parser)]
#[command(name = "panolayout", version, about = "Semi-supervised panoramic layout estimation on synthetic rooms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the training seed (and the data seed for generate-data)
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Overwrite a non-empty output directory
    #[arg(long)]
    force: bool,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset into --out
    GenerateData(Common),
    /// Train one model; --out receives history, summaries and checkpoints
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in --out
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the student and teacher checkpoints of the run in --out
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train all four perturbation modes and write a comparison table
    Ablate(Common),
    /// Run the built-in invariant checks
    Verify,
}

fn load_config(c: &Common, data_seed_too: bool) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
        if data_seed_too {
            cfg.data_seed = s;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<PathBuf, Error> {
    c.out.clone().ok_or_else(|| Error::Config("--out DIR is required".into()))
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::GenerateData(c) => {
            let cfg = load_config(&c, true)?;
            let out = out_dir(&c)?;
            let ds = experiments::cmd_generate(&cfg, &out, c.force)?;
            println!("samples={} content_hash={}", ds.samples.len(), ds.manifest.content_hash);
        }
        Command::Train { common, resume } => {
            let cfg = load_config(&common, false)?;
            let out = out_dir(&common)?;
            let res = experiments::cmd_train(&cfg, &out, resume, common.force)?;
            let b = &res.best_test;
            println!(
                "best={} iteration={} test_iou3d={:.4} test_rmse={:.4}",
                res.best.which.as_str(),
                res.best.iteration,
                b.iou3d,
                b.rmse
            );
        }
        Command::Evaluate { common, split } => {
            let cfg = load_config(&common, false)?;
            let split: SplitName = split.parse()?;
            let out = out_dir(&common)?;
            let r = experiments::cmd_evaluate(&cfg, &out, split)?;
            for (name, m) in [("student", &r.student), ("teacher", &r.teacher)] {
                println!(
                    "{name} iou3d={:.4} iou2d={:.4} ce={:.3} pe={:.3} rmse={:.4} delta1={:.4}",
                    m.iou3d, m.iou2d, m.corner_error_pct, m.pixel_error_pct, m.rmse, m.delta1
                );
            }
            println!("better={}", r.better.as_str());
        }
        Command::Ablate(c) => {
            let cfg = load_config(&c, false)?;
            let out = out_dir(&c)?;
            let rows = experiments::cmd_ablate(&cfg, &out, c.force)?;
            print!("{}", experiments::commands::ablation_csv(&cfg, &rows));
        }
        Command::Verify => {
            let checks = verify::run_checks()?;
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("summary checks={} failed={failed}", checks.len());
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
