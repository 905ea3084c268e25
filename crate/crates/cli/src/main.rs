//! `neuraldb`: build, edit, query, evaluate, diagnose and benchmark neural
//! key-value databases on the toy transformer.
//!
//! Exit status is 0 on success, 1 on runtime failure and 2 on usage or
//! configuration errors. Failures print one `error: kind=... reason="..."`
//! line to stderr and leave no outputs behind.

mod commands;
mod failure;
mod output;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use failure::Failure;
use output::OutDir;
use settings::{check_flags, resolve, Command, RunConfig, Settings, OUT_ENV};

#[derive(Parser)]
#[command(name = "neuraldb", version, about = "Gated key-value editing of a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Edit facts into one layer and save the resulting database
    BuildDb(Settings),
    /// Edit facts with any method and save the per-layer artifacts
    Edit(Settings),
    /// Look up the keys of facts in a saved database
    Query(Settings),
    /// Edit facts, then report efficacy, generalization and specificity
    Eval(Settings),
    /// Score pools of the implicit retrieval weights of an edit
    Diagnose(Settings),
    /// Time and size random databases of increasing size
    Bench(Settings),
    /// Insert, update or remove entries of a saved database
    Crud(Settings),
}

fn manifest(cfg: &RunConfig, outputs: &[String]) -> String {
    let v = json!({
        "tool": "neuraldb",
        "version": env!("CARGO_PKG_VERSION"),
        "formats": {
            "database": neuraldb::kvdb::DB_VERSION,
            "checkpoint": neuraldb::model::MODEL_VERSION,
        },
        "parallel": cfg!(feature = "parallel"),
        "workers": neuraldb::exec::worker_count(),
        "config": cfg,
        "outputs": outputs,
    });
    let mut s = serde_json::to_string_pretty(&v).unwrap();
    s.push('\n');
    s
}

fn run(cmd: Command, flags: Settings) -> Result<(), Failure> {
    let merged = flags.clone().with_config_file()?;
    check_flags(cmd, &flags, merged.method)?;
    let env_out = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let mut cfg = resolve(cmd, &merged, env_out)?;
    if let Some(jobs) = cfg.jobs {
        neuraldb::exec::limit_workers(jobs).map_err(|e| Failure::runtime("threads", e))?;
    }

    let mut out = OutDir::create(&cfg.out)?;
    match cmd {
        Command::BuildDb => commands::build_db(&mut cfg, &mut out)?,
        Command::Edit => commands::edit(&mut cfg, &mut out)?,
        Command::Query => commands::query(&mut cfg, &mut out)?,
        Command::Eval => commands::eval(&mut cfg, &mut out)?,
        Command::Diagnose => commands::diagnose(&mut cfg, &mut out)?,
        Command::Bench => commands::bench(&mut cfg, &mut out)?,
        Command::Crud => commands::crud(&mut cfg, &mut out)?,
    }
    let outputs = out.names();
    out.write("manifest.json", manifest(&cfg, &outputs))?;
    out.commit();
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, flags) = match cli.command {
        Cmd::BuildDb(s) => (Command::BuildDb, s),
        Cmd::Edit(s) => (Command::Edit, s),
        Cmd::Query(s) => (Command::Query, s),
        Cmd::Eval(s) => (Command::Eval, s),
        Cmd::Diagnose(s) => (Command::Diagnose, s),
        Cmd::Bench(s) => (Command::Bench, s),
        Cmd::Crud(s) => (Command::Crud, s),
    };
    match run(cmd, flags) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code)
        }
    }
}
