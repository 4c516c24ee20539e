use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use branchsim::scenario::{self, Report};
use branchsim::store::DEFAULT_CHECKPOINT_INTERVAL;
use branchsim::{Engine, Error, NodeId, ObservationSpec, ScenarioConfig};

use crate::{open_engine, render};

#[derive(Debug, Parser)]
#[command(
    name = "branchsim",
    version,
    about = "Develop trees of simulation scenarios that share prefixes and suffixes"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Store directory. Created on first use.
    #[arg(long, global = true, env = "BRANCHSIM_STORE")]
    pub store: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the root, attach the declared branches and run them to the horizon.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides the config horizon.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Re-run the configured window of a node with the reflection overrides.
    Reflect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        node: Option<u64>,
    },
    /// Branch from a stored past step with the retrospection overrides.
    Retrospect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        node: Option<u64>,
        #[arg(long)]
        until: Option<u64>,
    },
    /// Savings and equivalence-class summary for the store.
    Report {
        /// Config whose observation spec is used for equivalence classes.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve the HTTP/JSON API over the store.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: SocketAddr,
        /// Used only when the store is created.
        #[arg(long, default_value_t = DEFAULT_CHECKPOINT_INTERVAL)]
        checkpoint_interval: u64,
    },
}

/// Process exit status for an engine error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::StepNotStored { .. } => 2,
        _ => 1,
    }
}

fn load_config(path: &Path) -> Result<ScenarioConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    ScenarioConfig::from_json(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        e => e,
    })
}

fn require_store(global: &Global) -> Result<&Path, Error> {
    global.store.as_deref().ok_or_else(|| Error::Config("this command needs --store or BRANCHSIM_STORE".into()))
}

fn emit(out: &mut impl Write, value: &serde_json::Value) -> Result<(), Error> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn emit_report(out: &mut impl Write, format: Format, engine: &Engine, report: &Report) -> Result<(), Error> {
    match format {
        Format::Json => emit(out, &serde_json::to_value(report)?),
        Format::Table => Ok(write!(out, "{}", render::table(engine, report)?)?),
    }
}

/// Runs a batch command, writing results to `out`. Returns the exit code.
/// `serve` is handled by the binary.
pub fn execute(cli: &Cli, out: &mut impl Write) -> Result<u8, Error> {
    let g = &cli.global;
    match &cli.command {
        Command::Predict { config, workers, until } => {
            let mut cfg = load_config(config)?;
            if let Some(w) = workers {
                cfg.max_workers = *w;
            }
            if let Some(u) = until {
                cfg.horizon = *u;
            }
            let engine = open_engine(g.store.as_deref(), cfg.checkpoint_interval)?;
            let outcome = scenario::predict(&engine, &cfg);
            engine.save()?;
            let outcome = outcome?;
            let failed = !outcome.run.failed.is_empty();
            if failed {
                let failures: Vec<_> =
                    outcome.run.failed.iter().map(|(id, e)| json!({ "node": id, "error": e })).collect();
                emit(out, &json!({ "root": outcome.root, "branches": outcome.branches, "failed": failures }))?;
                return Ok(1);
            }
            let report = scenario::report(&engine, &cfg.observation)?;
            match g.format {
                Format::Json => emit(
                    out,
                    &json!({ "root": outcome.root, "branches": outcome.branches, "completed": outcome.run.completed, "report": report }),
                )?,
                Format::Table => emit_report(out, g.format, &engine, &report)?,
            }
            Ok(0)
        }
        Command::Reflect { config, node } => {
            let cfg = load_config(config)?;
            let engine = open_engine(Some(require_store(g)?), cfg.checkpoint_interval)?;
            let r = scenario::reflect(&engine, &cfg, node.map(NodeId));
            engine.save()?;
            let r = r?;
            match g.format {
                Format::Json => emit(out, &serde_json::to_value(&r)?)?,
                Format::Table => writeln!(
                    out,
                    "node {} reflected as {} over {}..={}: {}",
                    r.node,
                    r.reflected,
                    r.window.0,
                    r.window.1,
                    if r.unchanged { "unchanged" } else { "changed" }
                )?,
            }
            Ok(0)
        }
        Command::Retrospect { config, node, until } => {
            let cfg = load_config(config)?;
            let engine = open_engine(Some(require_store(g)?), cfg.checkpoint_interval)?;
            let r = scenario::retrospect(&engine, &cfg, node.map(NodeId), *until);
            engine.save()?;
            let r = r?;
            match g.format {
                Format::Json => emit(out, &serde_json::to_value(&r)?)?,
                Format::Table => writeln!(
                    out,
                    "node {} branched from {} at step {} and ran to {}",
                    r.child, r.parent, r.at_step, r.until_step
                )?,
            }
            Ok(0)
        }
        Command::Report { config } => {
            let obs = match config {
                Some(c) => load_config(c)?.observation,
                None => ObservationSpec::full_state(),
            };
            let path = require_store(g)?;
            if !path.join("manifest.json").exists() {
                return Err(Error::Config(format!("no store at {}", path.display())));
            }
            let engine = open_engine(Some(path), DEFAULT_CHECKPOINT_INTERVAL)?;
            let report = scenario::report(&engine, &obs)?;
            emit_report(out, g.format, &engine, &report)?;
            Ok(0)
        }
        Command::Serve { .. } => Err(Error::Config("serve is not a batch command".into())),
    }
}
