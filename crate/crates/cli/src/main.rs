mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use leakguard::evaluation::Metric;
use leakguard::search::Direction;

use crate::config::Settings;

/// Style-aligned generation with content-leakage localization and adaptive
/// reference-key scaling.
#[derive(Parser, Debug)]
#[command(name = "leakguard", version)]
struct Cli {
    /// Flat TOML file whose keys mirror the long flag names.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a reference and style-aligned targets with adaptive scaling.
    Generate {
        #[command(flatten)]
        settings: Settings,
        /// Use an existing reference image instead of generating one.
        #[arg(long)]
        ref_image: Option<PathBuf>,
    },
    /// Localize leakage between an existing reference and target image.
    Localize {
        #[command(flatten)]
        settings: Settings,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long = "tgt")]
        target: PathBuf,
        /// Exit with status 2 when leakage is found.
        #[arg(long)]
        exit_on_leak: bool,
    },
    /// Tune a parameter of an external generator by binary search.
    Tune {
        #[command(flatten)]
        settings: Settings,
        /// Shell command; `{theta}` and `{out}` are substituted. It must print
        /// the reference and target image paths.
        #[arg(long)]
        generator: String,
        /// Parameter range `a,b`.
        #[arg(long, value_parser = commands::tune::parse_range)]
        param_range: (f64, f64),
        /// increasing: larger values leak more. decreasing: the opposite.
        #[arg(long, default_value = "increasing")]
        direction: Direction,
    },
    /// Score generated sets with embedding metrics and yes/no questions.
    Evaluate {
        #[command(flatten)]
        settings: Settings,
        /// Directory holding `entry_*/entry.json` or `manifest.csv`.
        #[arg(long, conflicts_with = "manifest")]
        outputs: Option<PathBuf>,
        /// CSV manifest: entry_id, reference_path, target_path, ref_subject, tgt_subject.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma-separated: cl, text_alignment, set_consistency, q1, q2, q3.
        #[arg(long, value_delimiter = ',', required = true)]
        metrics: Vec<Metric>,
        /// Use the deterministic mock embedder and question answerer.
        #[arg(long)]
        mock: bool,
        /// Method name shown in the report.
        #[arg(long, default_value = "leakguard")]
        method: String,
    },
    /// Compute the no-leakage and full-leakage bounds of the CL score.
    Calibrate {
        #[command(flatten)]
        settings: Settings,
        /// Prompt-set file; the bundled 100-prompt set otherwise.
        #[arg(long)]
        prompt_set: Option<PathBuf>,
        /// Use only the first N prompt-set entries.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        mock: bool,
    },
    /// Render a reference and one target at a fixed scale on the mock
    /// backbone and print both image paths.
    RenderPair {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        alpha: f64,
    },
}

fn with_file(settings: Settings, config: &Option<PathBuf>) -> anyhow::Result<Settings> {
    Ok(match config {
        Some(p) => settings.over(Settings::load(p)?),
        None => settings,
    })
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = &cli.config;
    match cli.command {
        Command::Generate { settings, ref_image } => {
            commands::generate::run(&with_file(settings, cfg)?, ref_image.as_deref())
        }
        Command::Localize {
            settings,
            reference,
            target,
            exit_on_leak,
        } => commands::localize::run(&with_file(settings, cfg)?, &reference, &target, exit_on_leak),
        Command::Tune {
            settings,
            generator,
            param_range,
            direction,
        } => commands::tune::run(&with_file(settings, cfg)?, &generator, param_range, direction),
        Command::Evaluate {
            settings,
            outputs,
            manifest,
            metrics,
            mock,
            method,
        } => commands::evaluate::run(
            &with_file(settings, cfg)?,
            outputs.as_deref(),
            manifest.as_deref(),
            &metrics,
            mock,
            &method,
        ),
        Command::Calibrate {
            settings,
            prompt_set,
            limit,
            mock,
        } => commands::evaluate::calibrate(&with_file(settings, cfg)?, prompt_set.as_deref(), limit, mock),
        Command::RenderPair { settings, alpha } => {
            commands::generate::render_pair(&with_file(settings, cfg)?, alpha)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
