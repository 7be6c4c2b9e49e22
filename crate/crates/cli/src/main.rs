use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use prunetax_core::checkpoint;
use prunetax_core::data::synthetic;
use prunetax_core::experiment::analysis::{compare_reductions, pareto_table, retrain_report};
use prunetax_core::experiment::results::{read_summary_file, write_results_file};
use prunetax_core::experiment::sweep::mode_dir_name;
use prunetax_core::experiment::{
    run_signal, run_sweep, select_signals, train_model, ExperimentConfig, Prepared, RunStatus,
};
use prunetax_core::models::ModelName;
use prunetax_core::par;
use prunetax_core::saliency::{enumerate_signals, published_signals, resolve_signal, ValidityRules};

#[derive(Debug, Parser)]
#[command(name = "prunetax", version, about = "Channel saliency taxonomy and pruning experiments")]
struct Cli {
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepModes {
    On,
    Off,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Rules {
    Default,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Patterns,
    Separable,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset in PRND format.
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "patterns")]
        kind: DatasetKind,
        #[arg(long, default_value_t = 10_000)]
        count: usize,
        /// Image shape is taken from this model.
        #[arg(long, default_value = "lenet5-like")]
        model: String,
        #[arg(long, default_value_t = 0.6)]
        noise: f64,
        /// Seed of the class prototypes; `--seed` varies the samples.
        #[arg(long, default_value_t = 0)]
        prototype_seed: u64,
    },
    /// Train the configured model from scratch and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// List the enumerated signals.
    ListSignals {
        #[arg(long, value_enum, default_value = "default")]
        rules: Rules,
        /// Print the published catalog instead.
        #[arg(long)]
        published: bool,
    },
    /// Prune a trained checkpoint with one signal.
    Prune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        signal: String,
        #[arg(long, value_enum, default_value = "on")]
        retrain: OnOff,
        /// Defaults to the config's checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Prune with every selected signal and write per-signal CSVs plus a summary.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated ids or names, `all` or `published`; defaults to the config.
        #[arg(long, value_delimiter = ',')]
        signals: Option<Vec<String>>,
        #[arg(long, value_enum, default_value = "both")]
        retrain: SweepModes,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Keep the rows of a CSV on the (x up, y up) Pareto front.
    Pareto {
        #[arg(long)]
        summary: PathBuf,
        #[arg(long, default_value = "sparsity_at_1pct_drop")]
        x_col: String,
        #[arg(long, default_value = "test_acc_at_1pct_drop")]
        y_col: String,
        /// Output file (stdout if absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sparsity change from replacing a sum reduction by each alternative.
    CompareReductions {
        /// A mode directory with summary.csv, or a sweep directory (uses retrain-on).
        #[arg(long)]
        sweep_dir: PathBuf,
        /// Directory for reduction_improvements.csv and reduction_means.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retraining steps against sparsity reached without retraining.
    RetrainReport {
        /// Directory holding retrain-on/ and retrain-off/.
        #[arg(long)]
        sweep_dir: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        min_sparsity: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    if std::env::var("PRUNETAX_VERIFY").is_ok_and(|v| v == "1") {
        log::info!("verification mode: all arithmetic already runs in 64-bit floats");
    }
    let threads = cli.threads;
    match par::with_threads(threads, move || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli, path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out_dir {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::MakeDataset { out, kind, count, model, noise, prototype_seed } => {
            let model: ModelName = model.parse()?;
            let seed = cli.seed.unwrap_or(0);
            let data = match kind {
                DatasetKind::Patterns => {
                    synthetic::patterns(*count, model.input_shape(), 10, *noise, *prototype_seed, seed)
                }
                DatasetKind::Separable => synthetic::separable(*count, model.input_shape(), seed),
            };
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            data.write(out)?;
            println!("wrote {} samples of {:?} to {}", data.len(), data.shape(), out.display());
        }
        Command::Train { config } => {
            let cfg = load_config(&cli, config)?;
            let prepared = Prepared::load(&cfg)?;
            let outcome = train_model(&cfg, &prepared)?;
            let path = cfg.checkpoint_path();
            if let Some(dir) = path.parent() {
                create_dir(dir)?;
            }
            checkpoint::save(&outcome.net, &path)?;
            println!("final loss      {:.6}", outcome.final_loss);
            println!("train accuracy  {:.6}", outcome.train_acc);
            println!("eval accuracy   {:.6}", outcome.eval_acc);
            println!("test accuracy   {:.6}", outcome.test_acc);
            println!("checkpoint      {}", path.display());
        }
        Command::ListSignals { rules, published } => {
            let mut out = std::io::stdout().lock();
            if *published {
                for (name, spec) in published_signals() {
                    writeln!(out, "{name}\t{spec}")?;
                }
            } else {
                let rules = match rules {
                    Rules::Default => ValidityRules::default(),
                    Rules::None => ValidityRules::none(),
                };
                let all = enumerate_signals(rules);
                for s in &all {
                    writeln!(out, "{s}")?;
                }
                writeln!(out, "total {}", all.len())?;
            }
        }
        Command::Prune { config, signal, retrain, checkpoint: ckpt } => {
            let cfg = load_config(&cli, config)?;
            let spec = resolve_signal(signal)?;
            let net = checkpoint::load(&ckpt.clone().unwrap_or_else(|| cfg.checkpoint_path()))?;
            let prepared = Prepared::load(&cfg)?;
            let on = *retrain == OnOff::On;
            let (summary, rows, pruned) = run_signal(&net, &spec, prepared.data(), &cfg.harness, on)?;
            let dir = cfg.out_dir.join("prune");
            create_dir(&dir)?;
            let stem = format!("{spec}.{}", mode_dir_name(on));
            write_results_file(&dir.join(format!("{stem}.csv")), &rows)?;
            checkpoint::save(&pruned, &dir.join(format!("{stem}.prnw")))?;
            println!(
                "{spec}: {} steps, {}, sparsity at 1% drop {:.6}, at stop {:.6}",
                summary.steps,
                summary.status.name(),
                summary.sparsity_at_1pct_drop.unwrap_or(0.0),
                summary.sparsity_at_stop.unwrap_or(0.0)
            );
            println!("results in {}", dir.join(format!("{stem}.csv")).display());
        }
        Command::Sweep { config, signals, retrain, checkpoint: ckpt } => {
            let cfg = load_config(&cli, config)?;
            let specs = match signals {
                Some(list) => select_signals(list)?,
                None => cfg.signals.clone(),
            };
            let net = checkpoint::load(&ckpt.clone().unwrap_or_else(|| cfg.checkpoint_path()))?;
            let prepared = Prepared::load(&cfg)?;
            let dir = cfg.out_dir.join("sweep");
            let modes: &[bool] = match retrain {
                SweepModes::On => &[true],
                SweepModes::Off => &[false],
                SweepModes::Both => &[true, false],
            };
            let mut failed = 0;
            for &mode in modes {
                let outcome = run_sweep(&net, &specs, prepared.data(), &cfg.harness, mode, &dir)?;
                failed += outcome.summary.iter().filter(|r| r.status == RunStatus::Error).count();
                println!("{} signals -> {}", outcome.summary.len(), outcome.dir.join("summary.csv").display());
            }
            if failed > 0 {
                bail!("{failed} signal run(s) failed; see the summary error column");
            }
        }
        Command::Pareto { summary, x_col, y_col, out } => {
            let mut rdr = csv::Reader::from_path(summary).with_context(|| format!("reading {}", summary.display()))?;
            let header = rdr.headers()?.clone();
            let rows: Vec<csv::StringRecord> = rdr.records().collect::<Result<_, _>>()?;
            let front = pareto_table(&header, &rows, x_col, y_col)?;
            let sink: Box<dyn Write> = match out {
                Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
                None => Box::new(std::io::stdout().lock()),
            };
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(sink);
            w.write_record(&header)?;
            for r in &front {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        Command::CompareReductions { sweep_dir, out } => {
            let mode_dir = if sweep_dir.join("summary.csv").exists() {
                sweep_dir.clone()
            } else {
                sweep_dir.join(mode_dir_name(true))
            };
            let summary = read_summary_file(&mode_dir.join("summary.csv"))?;
            let cmp = compare_reductions(&summary)?;
            let out = out.clone().unwrap_or(mode_dir);
            create_dir(&out)?;
            let new_writer = |name: &str| -> Result<csv::Writer<std::fs::File>> {
                let p = out.join(name);
                let f = std::fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
                Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(f))
            };
            let mut w = new_writer("reduction_improvements.csv")?;
            w.write_record(["sum_signal", "alt_signal", "reduction", "improvement"])?;
            for p in &cmp.pairs {
                w.write_record([
                    p.sum_signal.as_str(),
                    &p.alt_signal,
                    p.reduction.name(),
                    &format!("{:.6}", p.improvement),
                ])?;
            }
            w.flush()?;
            let mut w = new_writer("reduction_means.csv")?;
            w.write_record(["reduction", "pairs", "mean_improvement"])?;
            for (r, n, m) in &cmp.means {
                w.write_record([r.name(), &n.to_string(), &format!("{m:.6}")])?;
                println!("{:<16} pairs {n:>3}  mean improvement {m:+.6}", r.name());
            }
            w.flush()?;
        }
        Command::RetrainReport { sweep_dir, min_sparsity, out } => {
            let on_dir = sweep_dir.join(mode_dir_name(true));
            let on = read_summary_file(&on_dir.join("summary.csv"))?;
            let off = read_summary_file(&sweep_dir.join(mode_dir_name(false)).join("summary.csv"))?;
            let report = retrain_report(&on, &off, &on_dir, *min_sparsity)?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            let sink: Box<dyn Write> = match out {
                Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
                None => Box::new(std::io::stdout().lock()),
            };
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(sink);
            w.write_record([
                "signal_id",
                "no_retrain_sparsity",
                "retrain_sparsity",
                "retrain_steps_to_target",
                "total_retrain_steps",
            ])?;
            for r in &report.rows {
                w.write_record([
                    r.signal_id.as_str(),
                    &format!("{:.6}", r.no_retrain_sparsity),
                    &format!("{:.6}", r.retrain_sparsity),
                    &r.retrain_steps_to_target.to_string(),
                    &r.total_retrain_steps.to_string(),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}
