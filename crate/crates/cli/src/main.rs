mod commands;
mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use clot_core::gateway::{Gateway, LlmBackend, ProceduralMock, RemoteBackend, RemoteConfig, TranscriptBackend};
use clot_core::{RefinementParams, Variant};

use crate::config::PipelineConfig;

#[derive(Parser, Debug)]
#[command(name = "clot", version, about = "Humor data formulation, self-refinement and evaluation")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    /// Scripted replies for `--backend transcript`.
    #[arg(long, global = true)]
    transcript: Option<PathBuf>,
    #[arg(long, global = true)]
    max_inflight: Option<usize>,
    /// Extra attempts after a transient backend failure.
    #[arg(long, global = true)]
    retries: Option<u32>,
    #[arg(long, global = true)]
    timeout_secs: Option<u64>,
    /// Append every backend request to this file (JSON lines).
    #[arg(long, global = true)]
    request_log: Option<PathBuf>,
    /// Treat the backend as unable to read images.
    #[arg(long, global = true)]
    text_only: bool,
    /// Print the plan without calling the backend or writing artifacts.
    #[arg(long, global = true)]
    dry_run: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Mock,
    Transcript,
    Remote,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize crawl records (or samples), optionally screen, and split.
    Ingest(commands::IngestArgs),
    /// Safety-screen samples with the backend.
    Screen(commands::ScreenArgs),
    /// Condition noun sets.
    Nouns {
        #[command(subcommand)]
        action: NounsAction,
    },
    /// Build instruction records and evaluation questions.
    Formulate(commands::FormulateArgs),
    /// One round of self-refinement over a training split.
    Refine(commands::RefineArgs),
    /// Generate one response for an image and/or text.
    Infer(commands::InferArgs),
    /// Ask choice and ranking questions and score the replies.
    Eval(commands::EvalArgs),
    /// Divergent-association questions.
    Dat {
        #[command(subcommand)]
        action: DatAction,
    },
    /// Cloud-guessing questions.
    Cgg {
        #[command(subcommand)]
        action: CggAction,
    },
    /// Print tables from saved evaluation reports.
    Report(commands::ReportArgs),
}

#[derive(Subcommand, Debug)]
enum NounsAction {
    Build(commands::NounsArgs),
}

#[derive(Subcommand, Debug)]
enum DatAction {
    Build(commands::DatBuildArgs),
    Score(commands::DatScoreArgs),
}

#[derive(Subcommand, Debug)]
enum CggAction {
    Build(commands::CggBuildArgs),
}

/// Settings shared by all subcommands after merging config and flags.
pub struct Ctx {
    pub cfg: PipelineConfig,
    pub config_hash: String,
    pub seed: u64,
    pub dry_run: bool,
    backend: BackendKind,
    transcript: Option<PathBuf>,
    max_inflight: usize,
    retries: u32,
    timeout: Duration,
    request_log: Option<PathBuf>,
    text_only: bool,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let cfg = match &cli.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        let backend = match (cli.backend, cfg.backend.kind.as_deref()) {
            (Some(b), _) => b,
            (None, Some(k)) => BackendKind::from_str(k, true).map_err(|e| anyhow::anyhow!("config backend.kind: {e}"))?,
            (None, None) => BackendKind::Mock,
        };
        Ok(Ctx {
            config_hash: run::config_hash(&cfg)?,
            seed: cli.seed.or(cfg.seed).unwrap_or(0),
            dry_run: cli.dry_run,
            backend,
            transcript: cli.transcript.clone().or_else(|| cfg.backend.transcript.clone()),
            max_inflight: cli.max_inflight.or(cfg.backend.max_inflight).unwrap_or(4),
            retries: cli.retries.or(cfg.backend.retries).unwrap_or(2),
            timeout: Duration::from_secs(cli.timeout_secs.or(cfg.backend.timeout_secs).unwrap_or(60)),
            request_log: cli.request_log.clone(),
            text_only: cli.text_only || cfg.backend.text_only.unwrap_or(false),
            cfg,
        })
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn retries(&self) -> u32 {
        self.retries
    }

    fn backend(&self) -> Result<Arc<dyn LlmBackend>> {
        Ok(match self.backend {
            BackendKind::Mock => {
                let m = ProceduralMock::new(self.seed);
                if self.text_only {
                    Arc::new(m.text_only())
                } else {
                    Arc::new(m)
                }
            }
            BackendKind::Transcript => {
                let path = self.transcript.as_ref().context("--backend transcript needs --transcript <file>")?;
                run::require(path)?;
                let t = TranscriptBackend::load(path)?;
                if self.text_only {
                    Arc::new(t.text_only())
                } else {
                    Arc::new(t)
                }
            }
            BackendKind::Remote => {
                let mut rc = RemoteConfig::from_env().or_else(|e| match &self.cfg.backend.base_url {
                    Some(base) => Ok(RemoteConfig::new(base.clone(), self.cfg.backend.model.clone().unwrap_or_default())),
                    None => Err(e),
                })?;
                if let Some(base) = &self.cfg.backend.base_url {
                    rc.base_url = base.trim_end_matches('/').to_string();
                }
                if let Some(m) = &self.cfg.backend.model {
                    rc.model = m.clone();
                }
                if let Some(var) = &self.cfg.backend.api_key_env {
                    rc.api_key = std::env::var(var).ok();
                }
                rc.max_attempts = self.retries + 1;
                rc.timeout = self.timeout;
                rc.images = !self.text_only;
                Arc::new(RemoteBackend::new(rc))
            }
        })
    }

    /// Backend identity string without constructing a network client.
    pub fn backend_name(&self) -> String {
        match self.backend {
            BackendKind::Mock => format!("mock:procedural-{}", self.seed),
            BackendKind::Transcript => format!(
                "transcript:{}",
                self.transcript
                    .as_ref()
                    .and_then(|p| run::digest(p).ok())
                    .map(|d| d[..16].to_string())
                    .unwrap_or_default()
            ),
            BackendKind::Remote => format!(
                "remote:{}",
                self.cfg
                    .backend
                    .model
                    .clone()
                    .or_else(|| std::env::var(clot_core::gateway::ENV_MODEL).ok())
                    .unwrap_or_default()
            ),
        }
    }

    pub fn gateway(&self) -> Result<Gateway> {
        let mut g = Gateway::new(self.backend()?).with_max_inflight(self.max_inflight);
        if let Some(ms) = self.cfg.backend.min_interval_ms {
            g = g.with_min_interval(Duration::from_millis(ms));
        }
        if let Some(path) = &self.request_log {
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .with_context(|| format!("cannot open request log {}", path.display()))?;
            g = g.with_request_log(Box::new(file));
        }
        Ok(g)
    }

    /// Touches the request log so that a dry run leaves an (empty) trace.
    pub fn touch_request_log(&self) -> Result<()> {
        if let Some(path) = &self.request_log {
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .with_context(|| format!("cannot open request log {}", path.display()))?;
        }
        Ok(())
    }

    pub fn refinement(&self, n: Option<usize>, rho: Option<f64>, rho_c: Option<f64>) -> Result<RefinementParams> {
        let p = RefinementParams {
            n: n.or(self.cfg.refine.n).unwrap_or(5),
            rho: rho.or(self.cfg.refine.rho).unwrap_or(0.5),
            rho_c: rho_c.or(self.cfg.refine.rho_c).unwrap_or(0.5),
            seed: self.seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn variants(&self, flag: &[Variant]) -> Result<Vec<Variant>> {
        if !flag.is_empty() {
            return Ok(flag.to_vec());
        }
        match &self.cfg.variants {
            Some(v) => v
                .iter()
                .map(|s| s.parse::<Variant>().map_err(anyhow::Error::from))
                .collect(),
            None => Ok(Variant::ALL.to_vec()),
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn dispatch(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli)?;
    match cli.command {
        Command::Ingest(a) => commands::ingest(&ctx, a),
        Command::Screen(a) => commands::screen(&ctx, a),
        Command::Nouns { action: NounsAction::Build(a) } => commands::nouns_build(&ctx, a),
        Command::Formulate(a) => commands::formulate(&ctx, a),
        Command::Refine(a) => commands::refine(&ctx, a),
        Command::Infer(a) => commands::infer(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Dat { action: DatAction::Build(a) } => commands::dat_build(&ctx, a),
        Command::Dat { action: DatAction::Score(a) } => commands::dat_score(&ctx, a),
        Command::Cgg { action: CggAction::Build(a) } => commands::cgg_build(&ctx, a),
        Command::Report(a) => commands::report(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
