use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rafcast::config::RunConfig;
use rafcast::error::exit;
use rafcast::pipeline::{self, ModelPaths};
use rafcast::Result;

/// Retrieval-augmented zero-shot forecasting: data, knowledge base,
/// training, evaluation and ablations.
#[derive(Parser)]
#[command(name = "rafcast", version = rafcast::artifact::VERSION)]
struct Cli {
    /// JSON run configuration; missing fields take the defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.lambda=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Data {
    /// Corpus manifest written by `gen-data`.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
}

#[derive(Args)]
struct Trained {
    /// Backbone checkpoint written by `pretrain`.
    #[arg(long, value_name = "PATH")]
    backbone: PathBuf,
    /// Knowledge base written by `build-kb`.
    #[arg(long, value_name = "PATH")]
    kb: PathBuf,
    /// Output directory of `train`.
    #[arg(long, value_name = "DIR")]
    model: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Generate the synthetic multi-domain corpus.
    GenData {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Sample the knowledge base from the non-held-out series.
    BuildKb {
        #[command(flatten)]
        data: Data,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Pretrain and freeze the backbone on every domain but the target.
    Pretrain {
        #[command(flatten)]
        data: Data,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Jointly train retriever and fusion around the frozen backbone.
    Train {
        #[command(flatten)]
        data: Data,
        #[arg(long, value_name = "PATH")]
        backbone: PathBuf,
        #[arg(long, value_name = "PATH")]
        kb: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Score held-out windows; without --model, the bare backbone.
    Eval {
        #[command(flatten)]
        data: Data,
        #[arg(long, value_name = "PATH")]
        backbone: PathBuf,
        #[arg(long, value_name = "PATH", requires = "model")]
        kb: Option<PathBuf>,
        #[arg(long, value_name = "DIR", requires = "kb")]
        model: Option<PathBuf>,
        /// Report path; wall-clock time goes to `<stem>.timing.json` beside it.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Run the ablation grid end to end from the config alone.
    Ablate {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Seeds to run concurrently.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
        jobs: u16,
    },
    /// Dump retrieved candidates and both forecasts for chosen windows.
    CaseStudy {
        #[command(flatten)]
        data: Data,
        #[command(flatten)]
        trained: Trained,
        /// Evaluation window indices, as ordered in the `eval` report.
        #[arg(long, value_name = "I", value_delimiter = ',', required = true)]
        query: Vec<usize>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn print_json<T: serde::Serialize>(v: &T) {
    let text = serde_json::to_string_pretty(v).expect("reports serialize");
    // A closed pipe (`| head`) is not an error.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Config => print_json(&cfg),
        Command::GenData { out } => {
            let m = pipeline::gen_data(&cfg, &out)?;
            eprintln!("wrote {} series to {}", m.datasets.len(), out.display());
        }
        Command::BuildKb { data, out } => {
            let kb = pipeline::build_kb(&cfg, &data.manifest, &out)?;
            eprintln!("wrote {} windows to {}", kb.len(), out.display());
        }
        Command::Pretrain { data, out } => print_json(&pipeline::pretrain(&cfg, &data.manifest, &out)?),
        Command::Train {
            data,
            backbone,
            kb,
            out,
        } => {
            let log = pipeline::train(&cfg, &data.manifest, &kb, &backbone, &out)?;
            eprintln!("{} steps, final loss {:?}", log.steps.len(), log.steps.last().map(|s| s.loss));
        }
        Command::Eval {
            data,
            backbone,
            kb,
            model,
            out,
        } => {
            let paths = kb.as_deref().zip(model.as_deref()).map(|(kb, dir)| ModelPaths { kb, dir });
            let r = pipeline::eval(&cfg, &data.manifest, &backbone, paths, &out)?;
            println!("mse {:?} over {} windows", r.report.mse, r.report.windows);
        }
        Command::Ablate { out, jobs } => {
            let r = pipeline::ablate(&cfg, &out, jobs.into(), &mut std::io::stderr())?;
            for row in &r.summary {
                let m = row.mean_mse.map_or("skipped".into(), |m| format!("{m:.5}"));
                println!("{:<10} {:<36} {m}", row.axis, row.label);
            }
        }
        Command::CaseStudy {
            data,
            trained,
            query,
            out,
        } => {
            let model = ModelPaths {
                kb: &trained.kb,
                dir: &trained.model,
            };
            for d in pipeline::case_study(&cfg, &data.manifest, &trained.backbone, model, &query, &out)? {
                println!("query {}: mse raf {:?} bare {:?}", d.query, d.mse_raf, d.mse_bare);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
