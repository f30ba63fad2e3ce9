use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use medcorpus::config::RunConfig;
use medcorpus::genclient::{Backend, HttpBackend, MockBackend};
use medcorpus::pipeline::{self, ComposeOptions, GenerateOptions, Outcome};
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(name = "medcorpus", author, version, about = "Build medical image-text instruction corpora and training plans")]
struct Cli {
    /// Run configuration (TOML or JSON).
    #[arg(long, global = true, default_value = "medcorpus.toml")]
    config: PathBuf,

    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load the registry and write the canonical corpus plus a rejection report.
    Ingest,
    /// Prompt the generation backend and assemble the instruction corpus.
    Generate {
        #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
        backend: BackendKind,
        /// Answer at most this many pending requests, then stop.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Build stage manifests, packed sequences and the training plan.
    Compose {
        /// Build Stage III from the raw mix, ignoring review decisions.
        #[arg(long)]
        no_review: bool,
    },
    /// Report corpus distributions (JSON, table and SVG chart).
    Stats,
    /// Show stage configs and verify the composed plan.
    Plan {
        /// Sample each stage's learning-rate curve over this many steps.
        #[arg(long)]
        total_steps: Option<u64>,
        #[arg(long, default_value_t = 11)]
        points: u64,
    },
    /// Serve the review API until interrupted.
    ReviewServe {
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.output {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn finish<R>(outcome: &Outcome<R>) -> ExitCode {
    for n in &outcome.notices {
        eprintln!("notice: {n}");
    }
    ExitCode::from(outcome.exit_code() as u8)
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

async fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Ingest => {
            let out = pipeline::cmd_ingest(&cfg)?;
            let r = &out.report;
            println!(
                "{} canonical records from {} datasets ({} rejected, {} rows skipped)",
                r.records,
                r.datasets.len(),
                r.rejected,
                r.skipped
            );
            Ok(finish(&out))
        }
        Command::Generate { backend, limit } => {
            let backend: Arc<dyn Backend> = match backend {
                BackendKind::Mock => Arc::new(MockBackend::new()),
                BackendKind::Http => {
                    Arc::new(HttpBackend::from_config(&cfg.client).context("configuring the http backend")?)
                }
            };
            let out = pipeline::cmd_generate(&cfg, backend, &GenerateOptions { limit }).await?;
            print_json(&out.report)?;
            Ok(finish(&out))
        }
        Command::Compose { no_review } => {
            let out = pipeline::cmd_compose(&cfg, &ComposeOptions { no_review })?;
            for s in &out.report.stages {
                println!(
                    "stage {:<3} {:>8} samples -> {:>7} packed sequences",
                    s.stage, s.samples, s.sequences
                );
            }
            Ok(finish(&out))
        }
        Command::Stats => {
            let out = pipeline::cmd_stats(&cfg)?;
            print!("{}", out.report.render_table());
            Ok(finish(&out))
        }
        Command::Plan { total_steps, points } => {
            let out = pipeline::cmd_plan(&cfg, total_steps, points)?;
            print_json(&out.report)?;
            Ok(finish(&out))
        }
        Command::ReviewServe { port } => {
            let port = port.unwrap_or(cfg.review.port);
            let shutdown = async {
                let _ = tokio::signal::ctrl_c().await;
                tracing::info!("shutting down");
            };
            pipeline::review_serve(&cfg, port, shutdown).await?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
