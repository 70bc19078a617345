//! `llink`: corpus generation, both training stages, evaluation and token analysis.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 missing input
//! artifact, 3 numeric failure during training.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use llink_core::pipeline::{self, Layout, PipelineConfig, ASSET_DIR_ENV};
use llink_core::Error;

#[derive(Parser)]
#[command(
    name = "llink",
    version,
    about = "Align a frozen encoder to a frozen decoder and inject K soft slots"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; built-in toy defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root shared by all commands.
    #[arg(long, default_value = "runs/toy")]
    out: PathBuf,
    /// Replace existing outputs instead of refusing.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the cipher corpus splits.
    GenData(Common),
    /// Stage A: contrastive projector training.
    TrainA(Common),
    /// Stage B: slot expansion, LoRA and usage enforcement.
    TrainB(Common),
    /// Retrieval, injected-vs-zeroed usage and token report.
    Eval(Common),
    /// Tokenization inflation of the eval corpus.
    AnalyzeTokens {
        #[command(flatten)]
        common: Common,
        /// Hugging Face tokenizer.json; overrides the config.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
    /// Print the effective config as TOML.
    ShowConfig(Common),
}

fn load_config(c: &Common) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn asset_dir() -> Option<PathBuf> {
    std::env::var_os(ASSET_DIR_ENV).map(PathBuf::from)
}

fn report_manifest(layout: &Layout, m: &pipeline::RunManifest) {
    println!("{}: wrote {} artifacts", m.command, m.outputs.len());
    for o in &m.outputs {
        println!("  {}  {}", &o.sha256[..16], o.path);
    }
    println!("manifest: {}", layout.manifest(&m.command).display());
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (common, tokenizer) = match &cli.command {
        Command::AnalyzeTokens { common, tokenizer } => (common, tokenizer.clone()),
        Command::GenData(c)
        | Command::TrainA(c)
        | Command::TrainB(c)
        | Command::Eval(c)
        | Command::ShowConfig(c) => (c, None),
    };
    let mut cfg = load_config(common)?;
    let layout = Layout::new(&common.out);
    let assets = asset_dir();
    match cli.command {
        Command::GenData(_) => report_manifest(
            &layout,
            &pipeline::gen_data(&cfg, &layout, common.overwrite)?,
        ),
        Command::TrainA(_) => report_manifest(
            &layout,
            &pipeline::train_a(&cfg, &layout, common.overwrite)?,
        ),
        Command::TrainB(_) => report_manifest(
            &layout,
            &pipeline::train_b(&cfg, &layout, common.overwrite)?,
        ),
        Command::Eval(_) => {
            let (m, report) = pipeline::eval(&cfg, &layout, common.overwrite, assets.as_deref())?;
            print!("{}", report.to_text());
            report_manifest(&layout, &m);
        }
        Command::AnalyzeTokens { .. } => {
            if tokenizer.is_some() {
                cfg.tokens.tokenizer = tokenizer;
            }
            let (m, summary) =
                pipeline::analyze_tokens(&cfg, &layout, common.overwrite, assets.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            report_manifest(&layout, &m);
        }
        Command::ShowConfig(_) => print!("{}", cfg.resolved().to_toml_string()?),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::MissingArtifact(_)) => 2,
        Some(Error::NonFinite { .. } | Error::DegenerateVector | Error::ZeroNorm) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
