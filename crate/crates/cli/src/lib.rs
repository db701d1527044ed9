//! `halm` command-line pipeline: ingest → infer → label → calibrate →
//! evaluate → tradeoff / histogram. Stages only talk through files under the
//! configured output directory.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use halm_core::corpus::Split;
use halm_core::inference::PromptStyle;
use halm_core::ppl_baseline::Calibration;
use halm_core::{Error, ErrorKind};

pub use config::PipelineConfig;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_TRANSPORT: u8 = 4;
pub const EXIT_CAPABILITY: u8 = 5;
pub const EXIT_IO: u8 = 6;

pub fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Transport => EXIT_TRANSPORT,
        ErrorKind::Capability => EXIT_CAPABILITY,
        ErrorKind::Io => EXIT_IO,
    }
}

#[derive(Debug, Parser)]
#[command(name = "halm", version, about = "Answer-or-search labeling and evaluation pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Values given here override the config file.
#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true, env = "HALM_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Base URL of the generation service.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    #[arg(long, global = true)]
    pub model_tag: Option<String>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub search_token: Option<String>,
    /// Normalization profile: `english` or `verbatim`.
    #[arg(long, global = true)]
    pub profile: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read the configured corpus files and write canonical per-split files.
    Ingest,
    /// Generate predictions for one split.
    Infer {
        #[arg(long)]
        split: Split,
        #[arg(long)]
        style: Option<PromptStyle>,
    },
    /// Build a masked training set from base-model predictions.
    Label {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Fit a perplexity threshold on judged predictions.
    Calibrate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        strategy: Option<Calibration>,
        #[arg(long)]
        target_rate: Option<f64>,
    },
    /// Compare an adapted policy against the base model.
    Evaluate {
        #[arg(long)]
        base: PathBuf,
        /// Predictions of the adapted model.
        #[arg(long, conflicts_with = "threshold", required_unless_present = "threshold")]
        adapted: Option<PathBuf>,
        /// Threshold file; the policy routes high-perplexity base answers to search.
        #[arg(long)]
        threshold: Option<PathBuf>,
        /// Report file stem under `<output_dir>/reports`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Outcome rates as a function of search-result quality.
    Tradeoff {
        #[arg(long)]
        report: PathBuf,
        /// Comma-separated ratios in [0, 1]; defaults to 0.0, 0.1, ..., 1.0.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Also emit the budget cost for these λ values.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Perplexity histograms split by judgment.
    Histogram {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Explicit comma-separated bin edges (in transformed units).
        #[arg(long, value_delimiter = ',')]
        edges: Option<Vec<f64>>,
        /// Bin raw perplexity instead of log-perplexity.
        #[arg(long)]
        raw: bool,
    },
}

impl GlobalArgs {
    pub fn load_config(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = &self.output_dir {
            cfg.paths.output_dir = absolutize(v);
        }
        if let Some(v) = &self.cache_dir {
            cfg.paths.cache_dir = Some(absolutize(v));
        }
        if let Some(v) = &self.endpoint {
            cfg.endpoint.url = Some(v.clone());
        }
        if let Some(v) = &self.model_tag {
            cfg.endpoint.model_tag = v.clone();
        }
        if let Some(v) = self.lambda {
            cfg.evaluation.lambda = v;
        }
        if let Some(v) = &self.search_token {
            cfg.labels.search_token = v.clone();
        }
        if let Some(v) = &self.profile {
            cfg.corpus.profile = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// Flag paths are relative to the working directory, not the config file.
fn absolutize(p: &std::path::Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

pub fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = cli.global.load_config()?;
    match cli.command {
        Command::Ingest => commands::ingest(&cfg),
        Command::Infer { split, style } => {
            if let Some(style) = style {
                cfg.prompt.style = style;
            }
            commands::infer(&cfg, split)
        }
        Command::Label { predictions } => commands::label(&cfg, &predictions),
        Command::Calibrate {
            predictions,
            strategy,
            target_rate,
        } => {
            if let Some(s) = strategy {
                cfg.calibration.strategy = s;
            }
            if target_rate.is_some() {
                cfg.calibration.target_rate = target_rate;
            }
            cfg.validate()?;
            commands::calibrate(&cfg, &predictions)
        }
        Command::Evaluate {
            base,
            adapted,
            threshold,
            name,
        } => {
            let policy = match (adapted, threshold) {
                (Some(a), _) => commands::Policy::Adapted(a),
                (None, Some(t)) => commands::Policy::Threshold(t),
                (None, None) => {
                    return Err(Error::Config("evaluate needs --adapted or --threshold".to_string()))
                }
            };
            commands::evaluate(&cfg, &base, &policy, name.as_deref())
        }
        Command::Tradeoff {
            report,
            ratios,
            lambdas,
        } => commands::tradeoff(&cfg, &report, ratios, lambdas),
        Command::Histogram {
            predictions,
            bins,
            edges,
            raw,
        } => commands::histogram(&cfg, &predictions, bins, edges, raw),
    }
}
