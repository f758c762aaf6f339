use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use iris_gate_cli::{commands, ServiceConfig};

/// Two-tier quality gate for self-captured eye images.
#[derive(Parser)]
#[command(name = "iris-gate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid search and repeated training; prints the experiment report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        tier: u8,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Binary metrics of one detector on an `id,path,label` manifest.
    Eval {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        tier: u8,
        /// Logistic JSON, `.onnx` file, or `heuristic`.
        #[arg(long)]
        model: String,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Hierarchical confusion of the cascade on an `id,path,hier_label` manifest.
    CascadeEval {
        #[arg(long)]
        tier1: String,
        #[arg(long)]
        tier2: String,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Verdict for a single image.
    Assess {
        #[arg(long)]
        tier1: String,
        #[arg(long)]
        tier2: String,
        image: PathBuf,
    },
    /// Run the HTTP service. Falls back to IRIS_GATE_CONFIG.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<Option<String>> {
    Ok(Some(match cli.command {
        Command::Synth { config, out } => commands::synth(&config, &out)?,
        Command::Train {
            config,
            tier,
            manifest,
            out,
        } => commands::train(&config, tier, manifest.as_deref(), &out)?,
        Command::Eval {
            tier,
            model,
            manifest,
        } => commands::eval(tier, &model, &manifest)?,
        Command::CascadeEval {
            tier1,
            tier2,
            manifest,
        } => commands::cascade_eval(&tier1, &tier2, &manifest)?,
        Command::Assess {
            tier1,
            tier2,
            image,
        } => commands::assess(&tier1, &tier2, &image)?,
        Command::Serve { config } => {
            let path = ServiceConfig::resolve_path(config.as_deref())?;
            let cfg = ServiceConfig::load(&path)?;
            tokio::runtime::Runtime::new()?.block_on(iris_gate_cli::service::serve(cfg))?;
            return Ok(None);
        }
    }))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(Some(out)) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
