use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;
use tsne_limits::error::{Error, Result};
use tsne_limits::experiments::{Command, ExperimentConfig};

/// Experiments on t-SNE energies and their continuum limits.
#[derive(Debug, Parser)]
#[command(name = "tsne-limits", version)]
struct Cli {
    /// TOML or JSON config; replaces the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV/JSON artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Option<Command>,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match (cli.config, cli.command) {
        (Some(path), None) => ExperimentConfig::load(&path)?,
        (None, Some(command)) => ExperimentConfig { command },
        (Some(_), Some(_)) => return Err(Error::Input("give either --config or a subcommand, not both".into())),
        (None, None) => return Err(Error::Input("missing subcommand (see --help)".into())),
    };
    let name = cfg.command.name();
    let hash = cfg.hash();
    let artifacts = cfg.run()?;
    artifacts.write(&cli.out, name, &hash)?;
    let toml = toml::to_string(&cfg).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(cli.out.join(format!("{name}.config.toml")), toml)?;
    let mut summary = artifacts.summary;
    summary["config_hash"] = json!(hash);
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
