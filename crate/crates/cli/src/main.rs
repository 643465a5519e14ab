//! `hpadapt`: corpus generation, recipe runs, η sweeps and reports.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 missing checkpoint or
//! input file, 1 anything else. Failures print one JSON object to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hpadapt::data::{split_sizes, Corpus};
use hpadapt::pipeline::{Checkpoint, StageSummary};
use hpadapt::report::{self, render_arch, render_report, render_sweep, RunConfig};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "hpadapt",
    version,
    about = "Architecture search and cross-domain adaptation of small Conformer models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a scalar config field, e.g. `recipe.stages.0.epochs=2`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(&self.config, &self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write it as a directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (defaults to `corpus.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the recipe for every seed and write a report.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rebuild the report from saved checkpoints.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the per-layer architecture of a checkpoint.
    DumpArch {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mark cells that differ from this checkpoint's architecture.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Run the recipe once per η in `[sweep]` with shared upstream stages.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, record) = error_record(&e);
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}

fn error_record(e: &anyhow::Error) -> (u8, serde_json::Value) {
    let core = e.chain().find_map(|c| c.downcast_ref::<hpadapt::Error>());
    let code = match core {
        Some(hpadapt::Error::Config { .. }) => 2,
        Some(hpadapt::Error::Missing { .. }) => 3,
        _ => 1,
    };
    let mut record = json!({
        "error": core.map_or("other", |c| c.kind()),
        "message": format!("{e:#}"),
    });
    match core {
        Some(hpadapt::Error::Config { field, .. }) => record["field"] = json!(field),
        Some(hpadapt::Error::Missing { path }) | Some(hpadapt::Error::Io { path, .. }) => {
            record["path"] = json!(path.display().to_string())
        }
        _ => {}
    }
    (code, record)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let Some(dir) = out.or(cfg.corpus.dir.clone()) else {
                return Err(hpadapt::Error::Config {
                    field: "corpus.dir".into(),
                    message: "no output directory (set corpus.dir or pass --out)".into(),
                }
                .into());
            };
            let corpus = hpadapt::data::generate(&cfg.corpus.spec)?;
            corpus
                .save(&dir)
                .with_context(|| format!("writing corpus to {}", dir.display()))?;
            print_corpus(&corpus, &dir);
        }
        Command::Run { cfg } => {
            let cfg = cfg.load()?;
            let corpus = cfg.corpus()?;
            let r = report::run(&cfg, &corpus, &mut print_stage)?;
            print!("{}", render_report(&r));
            println!("report written to {}", cfg.output_dir.join("report.json").display());
        }
        Command::Evaluate { cfg } => {
            let cfg = cfg.load()?;
            let corpus = cfg.corpus()?;
            let r = report::evaluate_saved(&cfg, &corpus)?;
            r.write_as(&cfg.output_dir, "evaluation")?;
            print!("{}", render_report(&r));
        }
        Command::DumpArch {
            checkpoint,
            reference,
            json,
        } => {
            let arch = Checkpoint::load(&checkpoint)?.current_arch()?;
            let reference = reference
                .map(|p| Checkpoint::load(&p).and_then(|c| c.current_arch()))
                .transpose()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&arch)?);
            } else {
                print!("{}", render_arch(&arch, reference.as_ref()));
            }
        }
        Command::Sweep { cfg } => {
            let cfg = cfg.load()?;
            if cfg.sweep.is_none() {
                bail!(hpadapt::Error::Config {
                    field: "sweep".into(),
                    message: "the sweep command needs a [sweep] section".into(),
                });
            }
            let corpus = cfg.corpus()?;
            let r = report::sweep(&cfg, &corpus, &mut print_stage)?;
            print!("{}", render_sweep(&r));
        }
    }
    Ok(())
}

fn print_corpus(corpus: &Corpus, dir: &std::path::Path) {
    println!("corpus written to {}", dir.display());
    for ((domain, split), n) in split_sizes(corpus) {
        println!("  {:<6} {:<7} {n:>5}", domain.to_string(), split.to_string());
    }
}

fn print_stage(seed: u64, s: &StageSummary) {
    let ter = s.best_dev_ter.map_or("-".to_string(), |t| format!("{:.2}%", 100.0 * t));
    let loss = s.final_train_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
    println!(
        "seed {seed} {:<16} epochs {:>3}  loss {loss:>8}  dev TER {ter:>7}  params {}",
        s.name, s.epochs_run, s.param_count
    );
}
