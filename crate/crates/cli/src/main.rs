// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line driver for the back-patching workbench.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! config, 4 missing upstream artifact, 5 refused to overwrite, 6 invalid
//! argument. Failures print one JSON object on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use autopatch::config::RunConfig;
use autopatch::experiments::{
    artifact_entries, run_full, stage_classifier, stage_eval, stage_histogram, stage_oracle, stage_sweep, stage_taskgen,
    stage_train, Run, RunOptions, SweepKind, EVAL_TABLE_FILE,
};
use autopatch::inference::EvalMode;
use autopatch::patch::LayerPair;
use autopatch::Error;
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "autopatch", version, about = "Classifier-gated hidden-state back-patching workbench")]
struct Cli {
    /// Run configuration (JSON). Built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; falls back to the config, then AUTOPATCH_WORKDIR.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,

    /// Worker threads for labelling and evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    /// Replace a named seed, e.g. `--seed-override train=3`. Repeatable.
    #[arg(long = "seed-override", global = true, value_name = "STAGE=K")]
    seed_override: Vec<String>,

    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    overwrite: bool,

    /// Layer pair as SRC:TGT, overriding the config.
    #[arg(long, global = true, value_name = "SRC:TGT")]
    layers: Option<LayerPair>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the world and train the model.
    TrainModel,
    /// Label every position of every labelling prompt.
    GenData,
    /// Train the gate on the labelled dataset.
    TrainGate,
    /// Evaluate solve rates (all modes unless --mode is given).
    Eval {
        #[arg(long)]
        mode: Option<EvalMode>,
    },
    /// Per-pair pipeline over source layers at a fixed distance.
    SweepSource,
    /// Per-pair pipeline over widening layer distances.
    SweepDistance,
    /// Run every stage and write the manifest.
    Report,
    /// Check the configuration and print its hash.
    ValidateConfig,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::MissingArtifact(_) => 4,
        Error::WouldOverwrite(_) => 5,
        Error::InvalidArgument(_) | Error::LayerOutOfRange { .. } => 6,
        _ => 1,
    }
}

fn kind(code: u8) -> &'static str {
    match code {
        2 => "usage",
        3 => "invalid_config",
        4 => "missing_artifact",
        5 => "would_overwrite",
        6 => "invalid_argument",
        _ => "runtime",
    }
}

fn fail(code: u8, message: String, extra: serde_json::Value) -> ExitCode {
    let mut obj = json!({ "error": kind(code), "exit_code": code, "message": message });
    if let (Some(o), Some(e)) = (obj.as_object_mut(), extra.as_object()) {
        o.extend(e.clone());
    }
    eprintln!("{obj}");
    ExitCode::from(code)
}

fn load_config(cli: &Cli) -> autopatch::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::MissingArtifact(p) => Error::Config(format!("config file {} not found", p.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    for o in &cli.seed_override {
        cfg.seeds.apply_override(o)?;
    }
    if let Some(l) = cli.layers {
        cfg.layers = l;
    }
    cfg.resolve_workdir(cli.workdir.as_deref());
    Ok(cfg)
}

fn print_artifacts(command: &str, run: &Run, outs: &[PathBuf]) -> autopatch::Result<()> {
    let entries = artifact_entries(&run.cfg.workdir(), outs)?;
    println!(
        "{}",
        json!({
            "command": command,
            "config_hash": run.cfg.hash(),
            "workdir": run.cfg.workdir(),
            "artifacts": entries,
        })
    );
    Ok(())
}

fn execute(cli: &Cli) -> autopatch::Result<Option<ExitCode>> {
    let cfg = load_config(cli)?;
    let run = Run::new(
        cfg,
        RunOptions {
            jobs: cli.jobs,
            overwrite: cli.overwrite,
        },
    )?;
    match &cli.command {
        Command::ValidateConfig => {
            println!(
                "{}",
                json!({ "valid": true, "config_hash": run.cfg.hash(), "workdir": run.cfg.workdir() })
            );
        }
        Command::TrainModel => {
            let mut outs = stage_taskgen(&run)?;
            outs.extend(stage_train(&run)?);
            print_artifacts("train-model", &run, &outs)?;
        }
        Command::GenData => print_artifacts("gen-data", &run, &stage_oracle(&run)?)?,
        Command::TrainGate => print_artifacts("train-gate", &run, &stage_classifier(&run)?)?,
        Command::Eval { mode } => {
            let mut outs = stage_eval(&run, *mode)?;
            if mode.is_none() {
                outs.extend(stage_histogram(&run)?);
                if let Ok(table) = std::fs::read_to_string(run.path(EVAL_TABLE_FILE)) {
                    eprint!("{table}");
                }
            }
            print_artifacts("eval", &run, &outs)?;
        }
        Command::SweepSource => print_artifacts("sweep-source", &run, &stage_sweep(&run, SweepKind::Source)?.0)?,
        Command::SweepDistance => {
            print_artifacts("sweep-distance", &run, &stage_sweep(&run, SweepKind::Distance)?.0)?
        }
        Command::Report => {
            let manifest = run_full(&run)?;
            println!("{}", serde_json::to_string(&manifest)?);
            if !manifest.succeeded() {
                let stage = manifest
                    .stages
                    .iter()
                    .find(|s| s.error.is_some())
                    .map(|s| s.name.clone())
                    .unwrap_or_default();
                return Ok(Some(fail(
                    1,
                    manifest.first_error().unwrap_or("stage failed").to_string(),
                    json!({ "stage": stage }),
                )));
            }
        }
    }
    Ok(None)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return fail(2, e.to_string().trim().to_string(), json!({}));
        }
    };
    match execute(&cli) {
        Ok(Some(code)) => code,
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            fail(code, e.to_string(), json!({}))
        }
    }
}
