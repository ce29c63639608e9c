use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use genreplay::config::parse_override;
use genreplay::{emit_report, run, validate_with_overrides, ExperimentConfig, HarnessError, Result};
use genreplay_core::checkpoint::read_header;

#[derive(Parser)]
#[command(name = "genreplay", version, about = "Memory-free generative replay experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file (TOML with dotted keys). Omit to use defaults only.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set recording.lambda3=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    tier: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    protocol: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Defaults to $GENREPLAY_OUTPUT_ROOT, then `runs`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed of a configuration.
    Run(ConfigArgs),
    /// Check a configuration and print it with all defaults filled in.
    Validate(ConfigArgs),
    /// Compare completed runs.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Print the header of a checkpoint file.
    InspectCheckpoint { path: PathBuf },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p).map_err(|e| HarnessError::io(format!("reading {}", p.display()), e))?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    let named = [("tier", &args.tier), ("method", &args.method), ("protocol", &args.protocol)];
    for (k, v) in named {
        if let Some(v) = v {
            overrides.push((k.to_string(), toml::Value::String(v.clone())));
        }
    }
    if let Some(s) = &args.seeds {
        overrides.push(parse_override(&format!("seeds=[{s}]"))?);
    }
    if let Some(p) = &args.output_dir {
        overrides.push(("output_dir".to_string(), toml::Value::String(p.to_string_lossy().into_owned())));
    }
    for o in &args.overrides {
        overrides.push(parse_override(o)?);
    }
    validate_with_overrides(&text, &overrides)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate(args) => {
            let cfg = load_config(&args)?;
            print!("{}", cfg.to_text());
            println!("# config_hash = {}", cfg.config_hash());
        }
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let manifest = run(&cfg)?;
            println!("{}", cfg.run_dir().display());
            eprintln!(
                "{} stages, {} cache hits, status {}",
                manifest.stages.len(),
                manifest.cache_hits(),
                manifest.status
            );
        }
        Command::Report { run_dirs, out } => {
            let report = emit_report(&run_dirs, &out)?;
            for f in &report.files {
                println!("{}", f.display());
            }
        }
        Command::InspectCheckpoint { path } => {
            let header = read_header(&path)?;
            println!("{}", serde_json::to_string_pretty(&header)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(if matches!(e, HarnessError::Config(_)) { 2 } else { 1 })
        }
    }
}
