//! Per-step result rows and per-signal summaries, as CSV.
//!
//! Floats are written with six decimals and lines end in `\n`, so identical
//! runs give identical bytes.

use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::prune::{ExperimentRecord, PruneRun, StopReason};

pub const RESULT_HEADER: [&str; 10] = [
    "signal_id",
    "seed",
    "step",
    "pruned_layer",
    "pruned_channel",
    "sparsity",
    "train_acc",
    "test_acc",
    "retrain_steps",
    "cumulative_retrain_steps",
];

pub const SUMMARY_HEADER: [&str; 11] = [
    "signal_id",
    "seed",
    "retrain",
    "status",
    "steps",
    "baseline_test_acc",
    "sparsity_at_1pct_drop",
    "test_acc_at_1pct_drop",
    "sparsity_at_stop",
    "cumulative_retrain_steps",
    "error",
];

/// Test-accuracy drop defining the summary operating point.
pub const ONE_PERCENT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ResultRow {
    pub signal_id: String,
    pub seed: u64,
    pub step: usize,
    pub pruned_layer: Option<usize>,
    pub pruned_channel: Option<usize>,
    pub sparsity: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub retrain_steps: usize,
    pub cumulative_retrain_steps: usize,
}

impl ResultRow {
    pub fn from_record(signal_id: &str, seed: u64, r: &ExperimentRecord) -> Self {
        ResultRow {
            signal_id: signal_id.to_string(),
            seed,
            step: r.step,
            pruned_layer: r.pruned.map(|c| c.layer),
            pruned_channel: r.pruned.map(|c| c.channel),
            sparsity: r.sparsity,
            train_acc: r.train_acc,
            test_acc: r.test_acc,
            retrain_steps: r.retrain_steps,
            cumulative_retrain_steps: r.cumulative_retrain_steps,
        }
    }

    fn fields(&self) -> [String; 10] {
        [
            self.signal_id.clone(),
            self.seed.to_string(),
            self.step.to_string(),
            opt(self.pruned_layer),
            opt(self.pruned_channel),
            fmt6(self.sparsity),
            fmt6(self.train_acc),
            fmt6(self.test_acc),
            self.retrain_steps.to_string(),
            self.cumulative_retrain_steps.to_string(),
        ]
    }
}

pub(crate) fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

pub fn write_results<W: Write>(w: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = writer(w);
    w.write_record(RESULT_HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn read_results<R: std::io::Read>(r: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(rdr.headers()?, &RESULT_HEADER)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_results_file(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_results(std::io::BufWriter::new(f), rows)
}

pub fn read_results_file(path: &Path) -> Result<Vec<ResultRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_results(std::io::BufReader::new(f)).map_err(|e| e.context(format!("reading {}", path.display())))
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if found.iter().ne(expected.iter().copied()) {
        return Err(Error::Config(format!(
            "unexpected CSV header `{}` (expected `{}`)",
            found.iter().collect::<Vec<_>>().join(","),
            expected.join(",")
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    StoppedOnDrop,
    Exhausted,
    Error,
}

impl RunStatus {
    pub fn name(self) -> &'static str {
        match self {
            RunStatus::StoppedOnDrop => "stopped_on_drop",
            RunStatus::Exhausted => "exhausted",
            RunStatus::Error => "error",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "stopped_on_drop" => Ok(RunStatus::StoppedOnDrop),
            "exhausted" => Ok(RunStatus::Exhausted),
            "error" => Ok(RunStatus::Error),
            _ => Err(Error::Config(format!("unknown run status `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub signal_id: String,
    pub seed: u64,
    pub retrain: bool,
    pub status: RunStatus,
    pub steps: usize,
    pub baseline_test_acc: Option<f64>,
    /// Sparsity of the last step of the leading run of steps whose test
    /// accuracy is within 1% of the baseline.
    pub sparsity_at_1pct_drop: Option<f64>,
    pub test_acc_at_1pct_drop: Option<f64>,
    pub sparsity_at_stop: Option<f64>,
    pub cumulative_retrain_steps: Option<usize>,
    pub error: String,
}

/// Index of the last step of the leading run within `drop` of the baseline.
pub fn operating_point(rows: &[ResultRow], drop: f64) -> Option<usize> {
    let base = rows.first()?.test_acc;
    let mut last = 0;
    for (i, r) in rows.iter().enumerate() {
        if base - r.test_acc > drop + 1e-12 {
            break;
        }
        last = i;
    }
    Some(last)
}

impl SummaryRow {
    pub fn from_rows(signal_id: &str, seed: u64, retrain: bool, status: RunStatus, rows: &[ResultRow]) -> Self {
        let at = operating_point(rows, ONE_PERCENT);
        SummaryRow {
            signal_id: signal_id.to_string(),
            seed,
            retrain,
            status,
            steps: rows.len().saturating_sub(1),
            baseline_test_acc: rows.first().map(|r| r.test_acc),
            sparsity_at_1pct_drop: at.map(|i| rows[i].sparsity),
            test_acc_at_1pct_drop: at.map(|i| rows[i].test_acc),
            sparsity_at_stop: rows.last().map(|r| r.sparsity),
            cumulative_retrain_steps: rows.last().map(|r| r.cumulative_retrain_steps),
            error: String::new(),
        }
    }

    pub fn from_run(signal_id: &str, seed: u64, retrain: bool, run: &PruneRun) -> (Self, Vec<ResultRow>) {
        let rows: Vec<ResultRow> = run.records.iter().map(|r| ResultRow::from_record(signal_id, seed, r)).collect();
        let status = match run.stop {
            StopReason::TestAccDrop => RunStatus::StoppedOnDrop,
            StopReason::Exhausted => RunStatus::Exhausted,
        };
        (Self::from_rows(signal_id, seed, retrain, status, &rows), rows)
    }

    pub fn failed(signal_id: &str, seed: u64, retrain: bool, error: &Error) -> Self {
        SummaryRow {
            signal_id: signal_id.to_string(),
            seed,
            retrain,
            status: RunStatus::Error,
            steps: 0,
            baseline_test_acc: None,
            sparsity_at_1pct_drop: None,
            test_acc_at_1pct_drop: None,
            sparsity_at_stop: None,
            cumulative_retrain_steps: None,
            error: error.to_string(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status != RunStatus::Error
    }

    fn fields(&self) -> [String; 11] {
        [
            self.signal_id.clone(),
            self.seed.to_string(),
            if self.retrain { "on" } else { "off" }.to_string(),
            self.status.name().to_string(),
            self.steps.to_string(),
            opt(self.baseline_test_acc.map(fmt6)),
            opt(self.sparsity_at_1pct_drop.map(fmt6)),
            opt(self.test_acc_at_1pct_drop.map(fmt6)),
            opt(self.sparsity_at_stop.map(fmt6)),
            opt(self.cumulative_retrain_steps),
            self.error.clone(),
        ]
    }
}

#[derive(Debug, Deserialize)]
struct RawSummary {
    signal_id: String,
    seed: u64,
    retrain: String,
    status: String,
    steps: usize,
    baseline_test_acc: Option<f64>,
    sparsity_at_1pct_drop: Option<f64>,
    test_acc_at_1pct_drop: Option<f64>,
    sparsity_at_stop: Option<f64>,
    cumulative_retrain_steps: Option<usize>,
    error: String,
}

pub fn write_summary<W: Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = writer(w);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn read_summary<R: std::io::Read>(r: R) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    check_header(rdr.headers()?, &SUMMARY_HEADER)?;
    rdr.deserialize::<RawSummary>()
        .map(|r| {
            let r = r?;
            Ok(SummaryRow {
                signal_id: r.signal_id,
                seed: r.seed,
                retrain: match r.retrain.as_str() {
                    "on" => true,
                    "off" => false,
                    other => return Err(Error::Config(format!("retrain must be on/off, got `{other}`"))),
                },
                status: RunStatus::parse(&r.status)?,
                steps: r.steps,
                baseline_test_acc: r.baseline_test_acc,
                sparsity_at_1pct_drop: r.sparsity_at_1pct_drop,
                test_acc_at_1pct_drop: r.test_acc_at_1pct_drop,
                sparsity_at_stop: r.sparsity_at_stop,
                cumulative_retrain_steps: r.cumulative_retrain_steps,
                error: r.error,
            })
        })
        .collect()
}

pub fn write_summary_file(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_summary(std::io::BufWriter::new(f), rows)
}

pub fn read_summary_file(path: &Path) -> Result<Vec<SummaryRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_summary(std::io::BufReader::new(f)).map_err(|e| e.context(format!("reading {}", path.display())))
}
