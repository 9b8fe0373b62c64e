use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neural_scoring::config::{Ablation, Precision, RunConfig};
use neural_scoring::evalkit::System;
use neural_scoring::{pipeline, Error, Result};

/// Neural scoring for multi-talker speaker verification.
#[derive(Parser)]
#[command(name = "ns", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration; defaults apply to every missing key.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides one config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Overwrite existing outputs of this stage.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the corpus, its evaluation sets and trial lists.
    Synth(Common),
    /// Pretrain and freeze the embedding extractor.
    Pretrain(Common),
    /// Train the scoring network.
    Train {
        #[command(flatten)]
        common: Common,
        /// shared-encoder, layers=K, no-pe or m=K; repeatable.
        #[arg(long)]
        ablation: Vec<String>,
    },
    /// Score every evaluation condition and write metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "ns")]
        system: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare mixture embeddings with both talkers' centroids.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        extractor: Option<PathBuf>,
    },
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got {s:?}")),
    }
}

/// Sets `a.b.c = value` in a TOML table, parsing `value` as TOML and
/// falling back to a bare string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("empty key in {spec:?}")))?;
    let mut table = doc;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p:?} in {key:?} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut doc = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for o in &c.overrides {
        apply_override(&mut doc, o)?;
    }
    let mut cfg = RunConfig::from_toml(&doc.to_string())?.with_env_seed()?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &c.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(p) = c.precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<S: serde::Serialize>(value: &S) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = resolve(&c)?;
            let layout = pipeline::cmd_synth(&cfg, c.force)?;
            println!("corpus written to {}", layout.root.display());
        }
        Command::Pretrain(c) => {
            let cfg = resolve(&c)?;
            print_json(&pipeline::cmd_pretrain(&cfg, c.force)?)?;
        }
        Command::Train { common, ablation } => {
            let cfg = resolve(&common)?;
            let ablations = ablation.iter().map(|a| a.parse()).collect::<Result<Vec<Ablation>>>()?;
            print_json(&pipeline::cmd_train(&cfg, &ablations, common.force)?)?;
        }
        Command::Eval {
            common,
            system,
            checkpoint,
        } => {
            let cfg = resolve(&common)?;
            let system: System = system.parse()?;
            let rows = pipeline::cmd_eval(&cfg, system, checkpoint.as_deref(), common.force)?;
            for r in &rows {
                println!(
                    "{:<8} {:<14} EER {:6.2}%  minDCF {:.4}  ({} target, {} nontarget)",
                    r.system,
                    r.condition,
                    100.0 * r.eer,
                    r.min_dcf,
                    r.n_target,
                    r.n_nontarget
                );
            }
        }
        Command::Probe { common, extractor } => {
            let cfg = resolve(&common)?;
            print_json(&pipeline::cmd_probe(&cfg, extractor.as_deref(), common.force)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
