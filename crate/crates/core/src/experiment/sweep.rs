//! Training from a config and running signal sweeps.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::results::{write_results_file, write_summary_file, ResultRow, SummaryRow};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::network::{accuracy, NetworkGraph};
use crate::prune::{check_compatible, run_prune_no_retrain, run_prune_with_retrain, HarnessConfig, PruneData};
use crate::saliency::SignalSpec;
use crate::train::train;

/// Datasets and the retrain/eval split a config describes.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub split: Split,
}

impl Prepared {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let train = Dataset::read(&cfg.dataset)?;
        let test = Dataset::read(&cfg.test_dataset)?;
        Self::new(cfg, train, test)
    }

    pub fn new(cfg: &ExperimentConfig, train: Dataset, test: Dataset) -> Result<Self> {
        let split = cfg.split.split(train.len(), cfg.seed)?;
        Ok(Prepared { train, test, split })
    }

    pub fn data(&self) -> PruneData<'_> {
        PruneData { train: &self.train, retrain: &self.split.retrain, eval: &self.split.eval, test: &self.test }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub net: NetworkGraph,
    pub final_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub test_acc: f64,
}

/// Initialises the configured model from `cfg.seed` and trains it on the
/// retraining split.
pub fn train_model(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = cfg.model.build()?;
    check_compatible(&net, &prepared.train, "dataset")?;
    check_compatible(&net, &prepared.test, "test_dataset")?;
    net.init_params(&mut rng);
    let report = train(&mut net, &prepared.train, &prepared.split.retrain, &cfg.train, &mut rng)?;
    let acc = |idx: &[usize]| -> Result<f64> {
        if idx.is_empty() {
            return Ok(f64::NAN);
        }
        accuracy(&net, &prepared.train.batches(idx, 256)?)
    };
    Ok(TrainOutcome {
        final_loss: report.final_loss,
        train_acc: acc(&prepared.split.retrain)?,
        eval_acc: acc(&prepared.split.eval)?,
        test_acc: accuracy(&net, &prepared.test.all_batches(256)?)?,
        net,
    })
}

/// Runs one signal on a copy of `net`.
pub fn run_signal(
    net: &NetworkGraph,
    spec: &SignalSpec,
    data: PruneData<'_>,
    harness: &HarnessConfig,
    retrain: bool,
) -> Result<(SummaryRow, Vec<ResultRow>, NetworkGraph)> {
    let mut copy = net.clone();
    let run = if retrain {
        run_prune_with_retrain(&mut copy, spec, data, harness)?
    } else {
        run_prune_no_retrain(&mut copy, spec, data, harness)?
    };
    if !run.fallback_steps.is_empty() {
        log::warn!("{spec}: zero scaling denominator replaced by 1 at steps {:?}", run.fallback_steps);
    }
    let (summary, rows) = SummaryRow::from_run(&spec.id(), harness.seed, retrain, &run);
    Ok((summary, rows, copy))
}

pub fn mode_dir_name(retrain: bool) -> &'static str {
    if retrain {
        "retrain-on"
    } else {
        "retrain-off"
    }
}

/// Per-signal CSV file name inside a mode directory.
pub fn signal_file(spec_id: &str) -> String {
    format!("{spec_id}.csv")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub summary: Vec<SummaryRow>,
}

/// Runs every signal independently in one retraining mode, writing
/// `<dir>/<mode>/<signal>.csv` and `<dir>/<mode>/summary.csv`.
///
/// A failing signal is logged and recorded in the summary; the sweep goes on.
pub fn run_sweep(
    net: &NetworkGraph,
    signals: &[SignalSpec],
    data: PruneData<'_>,
    harness: &HarnessConfig,
    retrain: bool,
    dir: &Path,
) -> Result<SweepOutcome> {
    let mode_dir = dir.join(mode_dir_name(retrain));
    std::fs::create_dir_all(&mode_dir).map_err(|e| Error::io(&mode_dir, e))?;
    let summary = crate::par::map_slice(signals, |spec| {
        let id = spec.id();
        let result = run_signal(net, spec, data, harness, retrain).and_then(|(summary, rows, _)| {
            write_results_file(&mode_dir.join(signal_file(&id)), &rows).map(|_| summary)
        });
        result.unwrap_or_else(|e| {
            log::error!("{id} ({}): {e}", mode_dir_name(retrain));
            SummaryRow::failed(&id, harness.seed, retrain, &e)
        })
    });
    write_summary_file(&mode_dir.join("summary.csv"), &summary)?;
    Ok(SweepOutcome { dir: mode_dir, summary })
}
