//! `mergelab`: generate suites, train experts, merge, adapt, evaluate and
//! analyze, one step per subcommand. Steps chain through a run directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use mergelab::workbench::pipeline::{self, Models, OUTPUT_ENV, SUITE_FILE};
use mergelab::workbench::report::{self, EvalRow, Row, SummaryRow};
use mergelab::workbench::{
    checkpoint, dataset, exit, exit_code, ExperimentConfig, Manifest, Method,
};
use mergelab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mergelab",
    version,
    about = "Task-vector model merging experiments"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config (JSON). Defaults to the config recorded by `gen` in the run directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory shared by chained steps.
    #[arg(long, env = OUTPUT_ENV, default_value = "runs")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum FixedMethod {
    WeightAvg,
    TaskArithmetic,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AdaptiveMethod {
    Adamerging,
    Symerge,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task suite and write it as a dataset file.
    Gen {
        #[command(flatten)]
        run: RunArgs,
        /// Overrides the config's top-level seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the base model and fine-tune one expert per task.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Merge experts with fixed coefficients.
    Merge {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        method: FixedMethod,
        /// Task arithmetic scaling; defaults to the config's `ta_lambda`.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Learn merging coefficients (and task layers) on unlabeled test inputs.
    Adapt {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        method: AdaptiveMethod,
    },
    /// Score a checkpoint, or the run's latest merge, on every task.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to score instead of the run's merged model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Where to write the eval report; defaults to the run directory.
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Run the configured analyses, reusing whatever earlier steps saved.
    Analyze {
        #[command(flatten)]
        run: RunArgs,
        /// Re-run the experiment recorded in this manifest.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
    },
    /// Aggregate eval reports from several run directories.
    Report {
        /// Run directories containing `eval.csv`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, env = OUTPUT_ENV, default_value = "runs")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                exit::USAGE as u8
            } else {
                exit::OK as u8
            });
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

/// Explicit config, else the one recorded by the step that produced the saved
/// merge, else the one `gen` recorded, else defaults.
fn load_config(args: &RunArgs) -> Result<ExperimentConfig> {
    if let Some(path) = &args.config {
        return ExperimentConfig::load(path);
    }
    if let Some(method) = pipeline::recorded_method(&args.out)? {
        let step = if method.is_adaptive() {
            "adapt"
        } else {
            "merge"
        };
        let recorded = args.out.join(format!("{step}.manifest.json"));
        if recorded.exists() {
            let mut cfg = Manifest::load(&recorded)?.config;
            cfg.method = method;
            return Ok(cfg);
        }
    }
    let recorded = args.out.join("gen.manifest.json");
    if recorded.exists() {
        return Ok(Manifest::load(&recorded)?.config);
    }
    Ok(ExperimentConfig::default())
}

fn load_suite(dir: &Path) -> Result<mergelab::TaskSuite> {
    let path = dir.join(SUITE_FILE);
    if !path.exists() {
        return Err(Error::InvalidInput(format!(
            "{} not found; run `gen` first",
            path.display()
        )));
    }
    dataset::load_suite(&path)
}

fn load_models(dir: &Path, suite: &mergelab::TaskSuite) -> Result<Models> {
    if !dir.join(pipeline::BASE_FILE).exists() {
        return Err(Error::InvalidInput(format!(
            "no models in {}; run `finetune` first",
            dir.display()
        )));
    }
    Models::load(dir, suite)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { run, seed } => {
            let mut cfg = load_config(&run)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let suite = pipeline::generate(&cfg)?;
            std::fs::create_dir_all(&run.out)?;
            dataset::save_suite(&suite, &run.out.join(SUITE_FILE))?;
            Manifest::new("gen", &cfg).write(&run.out)?;
            info!("wrote {}", run.out.join(SUITE_FILE).display());
        }
        Command::Finetune { run } => {
            let cfg = load_config(&run)?;
            let suite = load_suite(&run.out)?;
            let models = pipeline::train_models(&cfg, &suite)?;
            models.save(&run.out)?;
            Manifest::new("finetune", &cfg).write(&run.out)?;
        }
        Command::Merge {
            run,
            method,
            lambda,
        } => {
            let mut cfg = load_config(&run)?;
            cfg.method = match method {
                FixedMethod::WeightAvg => Method::WeightAvg,
                FixedMethod::TaskArithmetic => Method::TaskArithmetic,
            };
            if let Some(l) = lambda {
                if !l.is_finite() {
                    return Err(Error::config("lambda", "must be finite"));
                }
                cfg.ta_lambda = l;
            }
            let suite = load_suite(&run.out)?;
            let models = load_models(&run.out, &suite)?;
            pipeline::run_method(&cfg, cfg.method, &suite, &models)?.save(&run.out)?;
            Manifest::new("merge", &cfg).write(&run.out)?;
        }
        Command::Adapt { run, method } => {
            let mut cfg = load_config(&run)?;
            cfg.method = match method {
                AdaptiveMethod::Adamerging => Method::Adamerging,
                AdaptiveMethod::Symerge => Method::Symerge,
            };
            cfg.validate()?;
            let suite = load_suite(&run.out)?;
            let models = load_models(&run.out, &suite)?;
            let out = pipeline::run_method(&cfg, cfg.method, &suite, &models)?;
            if let Some(o) = &out.outcome {
                for w in &o.warnings {
                    log::warn!("{w}");
                }
            }
            out.save(&run.out)?;
            Manifest::new("adapt", &cfg).write(&run.out)?;
        }
        Command::Eval {
            run,
            checkpoint: ckpt,
            report_dir,
        } => {
            let cfg = load_config(&run)?;
            let suite = load_suite(&run.out)?;
            let manifest = Manifest::new("eval", &cfg);
            let hash = manifest.hash()?;
            let (label, params) = match &ckpt {
                Some(p) => (
                    p.file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                    checkpoint::load_checkpoint(p)?,
                ),
                None => {
                    let p = run.out.join(pipeline::MERGED_FILE);
                    if !p.exists() {
                        return Err(Error::InvalidInput(format!(
                            "{} not found; pass --checkpoint or run `merge`/`adapt` first",
                            p.display()
                        )));
                    }
                    ("merged".to_string(), checkpoint::load_checkpoint(&p)?)
                }
            };
            let rows = pipeline::eval_checkpoint(&hash, &label, &suite, &params)?;
            let dir = report_dir.unwrap_or(run.out.clone());
            manifest.write(&dir)?;
            report::write_table(&dir, &rows)?;
            for r in &rows {
                println!("{}\ttask {}\t{} {:.4}", r.method, r.task, r.metric, r.value);
            }
        }
        Command::Analyze { run, manifest } => {
            let cfg = match &manifest {
                Some(m) => Manifest::load(m)?.config,
                None => load_config(&run)?,
            };
            let (hash, reports) = pipeline::analyze_dir(&cfg, &run.out)?;
            println!("manifest {hash}");
            if let Some(eval) = &reports.eval {
                print_mean(eval);
            }
        }
        Command::Report { runs, out } => {
            let mut rows: Vec<EvalRow> = Vec::new();
            for dir in &runs {
                rows.extend(report::read_csv::<EvalRow>(
                    &dir.join(format!("{}.csv", EvalRow::TABLE)),
                )?);
            }
            let summary = report::summarize(&rows);
            report::write_table::<SummaryRow>(&out, &summary)?;
            for s in summary.iter().filter(|s| s.task == "mean") {
                println!(
                    "{}\t{}\t{} {:.4} ± {:.4} ({} runs)",
                    s.method, s.split, s.metric, s.mean, s.std, s.runs
                );
            }
        }
    }
    Ok(())
}

fn print_mean(rows: &[EvalRow]) {
    let clean: Vec<&EvalRow> = rows.iter().filter(|r| r.split == "clean").collect();
    if let Some(first) = clean.first() {
        let mean = clean.iter().map(|r| r.value).sum::<f64>() / clean.len() as f64;
        println!("{} mean clean {} {:.4}", first.method, first.metric, mean);
    }
}
