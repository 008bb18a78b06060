//! `tcda`: runs the named experiments and writes CSV tables, a manifest and
//! checkpoints to an output directory.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure. On
//! failure a one-line JSON error record goes to stderr (and to
//! `error.json` when the output directory exists).

mod config;
mod runners;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::{RunArgs, RunConfig, UsageError};
use runners::{Outcome, Output, PartialResults};

#[derive(Parser)]
#[command(name = "tcda", version, about = "Hybrid surrogate and 4D-Var experiments on two-scale Lorenz dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment
    Run(RunArgs),
    /// List experiment ids
    List,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match cli.command {
        Command::List => {
            for e in runners::EXPERIMENTS {
                println!("{:<14} {}", e.id, e.about);
            }
            ExitCode::SUCCESS
        }
        Command::Run(args) => {
            let mut out_dir = None;
            match execute(&args, &mut out_dir) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => report(&e, out_dir.as_deref()),
            }
        }
    }
}

fn execute(args: &RunArgs, out_dir: &mut Option<std::path::PathBuf>) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(args)?;
    let exp = runners::find(&args.experiment)?;
    let mut out = Output::new(cfg.out_dir(exp.id), exp.id, &cfg)?;
    *out_dir = Some(out.dir().to_path_buf());
    match runners::run(exp, &cfg, &mut out) {
        Ok(Outcome::Completed) => {
            out.finish("completed")?;
            println!("{} completed; results in {}", exp.id, out.dir().display());
            Ok(())
        }
        Ok(Outcome::Diverged(what)) => {
            out.finish("diverged")?;
            Err(PartialResults(what).into())
        }
        Err(e) => {
            out.finish("failed")?;
            Err(e)
        }
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some() || matches!(c.downcast_ref::<tcda::Error>(), Some(tcda::Error::Config(_)))
    })
}

fn report(e: &anyhow::Error, out_dir: Option<&std::path::Path>) -> ExitCode {
    let (kind, code) = if is_usage(e) {
        ("config", 1)
    } else if e.downcast_ref::<PartialResults>().is_some() {
        ("diverged", 2)
    } else {
        ("runtime", 2)
    };
    let record = json!({ "status": "error", "kind": kind, "message": format!("{e:#}") });
    eprintln!("{record}");
    if let Some(dir) = out_dir {
        let _ = std::fs::write(dir.join("error.json"), record.to_string());
    }
    ExitCode::from(code)
}
