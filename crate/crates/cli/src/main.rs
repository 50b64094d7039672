//! `retina-vq` command-line front end.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on bad arguments or
//! configuration. Failures are printed as a single `error: ...` line.

mod commands;
mod tsv;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use retina_vq::config::RunConfig;
use retina_vq::train::TrainConfig;

#[derive(Parser, Debug)]
#[command(name = "retina-vq", version, about = "Retina-aware VQGAN anomaly detection for OCT B-scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key: value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set learning_rate=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    pub overrides: Vec<(String, String)>,
    /// Base preset the configuration is layered on.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Data-pipeline worker threads; 1 runs sequentially, 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum Preset {
    Desk,
    Paper,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(commands::SynthArgs),
    /// Extract the retinal ROI; writes `<stem>.roi.png` beside each input.
    ExtractRoi(commands::ExtractRoiArgs),
    /// Perturb an image inside its ROI; writes `<stem>.neg.png`, the lesion
    /// mask and a parameter side-car.
    Perturb(commands::PerturbArgs),
    /// Train a model on a folder of normal scans.
    Train(commands::TrainArgs),
    /// Score images; writes a TSV `id score label_pred`.
    Score(commands::ScoreArgs),
    /// Write anomaly maps, heatmaps and binarized masks.
    Localize(commands::LocalizeArgs),
    /// Detection or segmentation report.
    Evaluate(commands::EvaluateArgs),
    /// Dice/mIoU of every error metric for one or more checkpoints.
    CompareMetrics(commands::CompareArgs),
}

/// A failure with its exit code.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<retina_vq::Error> for Failure {
    fn from(e: retina_vq::Error) -> Self {
        let code = match e {
            retina_vq::Error::Config(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<retina_vq::Error>() {
            Ok(inner) => inner.into(),
            Err(e) => Failure {
                code: 1,
                message: format!("{e:#}"),
            },
        }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

impl Common {
    /// Defaults < preset < file < `APP_*` environment < `--set` < `extra`.
    pub fn resolve(&self, extra: &[(String, String)]) -> CliResult<RunConfig> {
        let base = match self.preset {
            Preset::Desk => RunConfig::from_train(TrainConfig::desk()),
            Preset::Paper => RunConfig::from_train(TrainConfig::paper()),
        };
        let mut all = self.overrides.clone();
        all.extend_from_slice(extra);
        Ok(RunConfig::resolve(base, self.config.as_deref(), &all)?)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::ExtractRoi(a) => commands::extract_rois(a),
        Command::Perturb(a) => commands::perturb(a),
        Command::Train(a) => commands::train(a),
        Command::Score(a) => commands::score(a),
        Command::Localize(a) => commands::localize(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::CompareMetrics(a) => commands::compare_metrics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
