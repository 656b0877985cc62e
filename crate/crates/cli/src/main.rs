use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sqlharness::prompt::PromptMode;
use sqlharness::selection::SelectionMode;
use sqlharness_cli::commands::{self, ReportFormat, Workspace};
use sqlharness_cli::config::{ConfigError, Overrides, RunConfig};

/// Text-to-SQL harness: prompt serialization, sampling with execution-based
/// selection, column selection, content matching, evaluation and synthetic
/// data generation.
#[derive(Parser)]
#[command(name = "sqlharness", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(short, long, global = true, env = "SQLHARNESS_CONFIG", default_value = "sqlharness.toml")]
    config: PathBuf,
    /// Output directory (overrides paths.output).
    #[arg(long, global = true, env = "SQLHARNESS_OUTPUT")]
    output: Option<PathBuf>,
    /// Seed forwarded to the backend (overrides seed).
    #[arg(long, global = true, env = "SQLHARNESS_SEED")]
    seed: Option<u64>,
    /// Replay file (overrides backend.replay_file).
    #[arg(long, global = true, env = "SQLHARNESS_REPLAY")]
    replay: Option<PathBuf>,
    /// Completion endpoint URL (overrides backend.endpoint).
    #[arg(long, global = true, env = "SQLHARNESS_ENDPOINT")]
    endpoint: Option<String>,
    /// Model identifier sent to the endpoint (overrides backend.model).
    #[arg(long, global = true, env = "SQLHARNESS_MODEL")]
    model: Option<String>,
    /// API key; falls back to the variable named by backend.api_key_env.
    #[arg(long, global = true, env = "SQLHARNESS_API_KEY", hide_env_values = true)]
    api_key: Option<String>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Jobs {
    /// Worker threads; defaults to the logical core count.
    #[arg(short, long)]
    jobs: Option<usize>,
}

impl Jobs {
    fn get(&self) -> usize {
        self.jobs.unwrap_or_else(commands::default_jobs).max(1)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Concise,
    Verbose,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    GroundTruth,
    ProgramAided,
    Retrieval,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Print the prompt one question would be sent with.
    Serialize {
        /// Question to render.
        #[arg(long)]
        question_id: String,
        /// Paradigm whose settings are used; defaults to the first one.
        #[arg(long)]
        paradigm: Option<String>,
        /// Force the template family.
        #[arg(long, value_enum)]
        style: Option<StyleArg>,
    },
    /// Sample, execute and select SQL for every question.
    Predict {
        /// Paradigm to run (repeatable); defaults to all.
        #[arg(long)]
        paradigm: Vec<String>,
        /// Also write a cross-paradigm majority file.
        #[arg(long)]
        combine: bool,
        /// Skip questions already completed in existing output files.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        jobs: Jobs,
    },
    /// Score a prediction file with execution and test-suite accuracy.
    Evaluate {
        /// Prediction JSONL (or any JSON with question_id and SQL).
        #[arg(long)]
        predictions: PathBuf,
        /// Skip test-suite accuracy.
        #[arg(long)]
        no_ts: bool,
        /// Metrics JSON destination.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-difficulty CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Exit 1 when execution accuracy falls below this fraction.
        #[arg(long)]
        ex_floor: Option<f64>,
        #[command(flatten)]
        jobs: Jobs,
    },
    /// Score a column selector against gold-SQL references.
    SelectColumns {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Columns kept by retrieval (overrides selection.top_k).
        #[arg(long)]
        top_k: Option<usize>,
        /// Draft SQL per question for program-aided mode.
        #[arg(long)]
        preliminary: Option<PathBuf>,
        #[command(flatten)]
        jobs: Jobs,
    },
    /// Print database values matched by question keywords, as JSONL.
    MatchContent {
        /// Single question; defaults to all.
        #[arg(long)]
        question_id: Option<String>,
        /// Similarity threshold (overrides content.threshold).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Generate and filter synthetic SQL rewrites.
    Synthesize {
        #[command(flatten)]
        jobs: Jobs,
    },
    /// Render a saved metrics JSON.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: FormatArg,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Report { metrics, format } = &cli.command {
        let format = match format {
            FormatArg::Table => ReportFormat::Table,
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        };
        print!("{}", commands::render_report(metrics, format)?);
        return Ok(());
    }

    let overrides = Overrides {
        output: cli.output,
        seed: cli.seed,
        replay_file: cli.replay,
        endpoint: cli.endpoint,
        model: cli.model,
        api_key: cli.api_key,
    };
    let mut config = RunConfig::load(&cli.config, &overrides)?;
    if let Command::MatchContent {
        threshold: Some(t), ..
    } = &cli.command
    {
        config.content.threshold = *t;
        config.content.validate().map_err(|e| ConfigError(e.to_string()))?;
    }
    let ws = Workspace::open(config)?;

    match cli.command {
        Command::Serialize {
            question_id,
            paradigm,
            style,
        } => {
            let mode = style.map(|s| match s {
                StyleArg::Concise => PromptMode::Concise,
                StyleArg::Verbose => PromptMode::Verbose,
            });
            println!("{}", commands::serialize(&ws, &question_id, paradigm.as_deref(), mode)?);
        }
        Command::Predict {
            paradigm,
            combine,
            resume,
            jobs,
        } => {
            let client = commands::build_client(&ws.config)?;
            let opts = commands::PredictOptions {
                paradigms: paradigm,
                combine,
                resume,
                jobs: jobs.get(),
            };
            let s = commands::predict(&ws, &client, &opts)?;
            for f in &s.files {
                println!("{}", f.display());
            }
            eprintln!(
                "{} records, {} failed, {} resumed",
                s.records, s.failed, s.skipped
            );
        }
        Command::Evaluate {
            predictions,
            no_ts,
            out,
            csv,
            ex_floor,
            jobs,
        } => {
            let opts = commands::EvaluateOptions {
                predictions,
                test_suite: no_ts.then_some(false),
                out,
                csv,
                jobs: jobs.get(),
            };
            let (report, path) = commands::evaluate(&ws, &opts)?;
            print!("{}", sqlharness::eval::render_table(&report));
            eprintln!("metrics written to {}", path.display());
            if let Some(floor) = ex_floor.or(ws.config.evaluation.ex_floor) {
                if report.ex < floor {
                    anyhow::bail!("execution accuracy {:.4} below floor {floor}", report.ex);
                }
            }
        }
        Command::SelectColumns {
            mode,
            top_k,
            preliminary,
            jobs,
        } => {
            let mode = match mode {
                ModeArg::GroundTruth => SelectionMode::GroundTruth,
                ModeArg::ProgramAided => SelectionMode::ProgramAided,
                ModeArg::Retrieval => SelectionMode::Retrieval,
            };
            let report =
                commands::select_columns(&ws, mode, top_k, preliminary.as_deref(), jobs.get())?;
            print!("{}", commands::render_selection_table(&report));
        }
        Command::MatchContent { question_id, .. } => {
            print!("{}", commands::match_content(&ws, question_id.as_deref())?);
        }
        Command::Synthesize { jobs } => {
            let client = commands::build_client(&ws.config)?;
            let stats = commands::synthesize(&ws, &client, jobs.get())?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
