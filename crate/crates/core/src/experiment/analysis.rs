//! Post-hoc analyses over sweep outputs.

use std::collections::BTreeMap;
use std::path::Path;

use super::results::{read_results_file, SummaryRow};
use super::sweep::signal_file;
use crate::error::{Error, Result};
use crate::saliency::{Reduction, SignalSpec};

/// Indices of points not dominated in (x up, y up), ordered by ascending x
/// (ties keep input order).
pub fn pareto_front(points: &[(f64, f64)]) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::Empty("pareto input"));
    }
    let dominated = |i: usize| {
        let (xi, yi) = points[i];
        points.iter().any(|&(x, y)| x >= xi && y >= yi && (x > xi || y > yi))
    };
    let mut front: Vec<usize> = (0..points.len()).filter(|&i| !dominated(i)).collect();
    front.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0));
    Ok(front)
}

/// Keeps the rows of a CSV table on the Pareto front of two numeric columns.
/// Rows with an empty or non-numeric value in either column are skipped.
pub fn pareto_table(
    header: &csv::StringRecord,
    rows: &[csv::StringRecord],
    x_col: &str,
    y_col: &str,
) -> Result<Vec<csv::StringRecord>> {
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Config(format!("column `{name}` not found")))
    };
    let (xi, yi) = (col(x_col)?, col(y_col)?);
    let mut kept = Vec::new();
    let mut points = Vec::new();
    for r in rows {
        let parse = |i: usize| r.get(i).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite());
        if let (Some(x), Some(y)) = (parse(xi), parse(yi)) {
            kept.push(r.clone());
            points.push((x, y));
        }
    }
    Ok(pareto_front(&points)?.into_iter().map(|i| kept[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionPair {
    pub sum_signal: String,
    pub alt_signal: String,
    pub reduction: Reduction,
    pub improvement: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionComparison {
    pub pairs: Vec<ReductionPair>,
    /// `(reduction, count, mean improvement)` for each alternative with pairs.
    pub means: Vec<(Reduction, usize, f64)>,
}

impl ReductionComparison {
    pub fn mean_for(&self, r: Reduction) -> Option<f64> {
        self.means.iter().find(|m| m.0 == r).map(|m| m.2)
    }
}

/// Matches each `sum` signal with the signals differing only in reduction
/// and reports `sparsity_alt - sparsity_sum` at the 1%-drop point.
pub fn compare_reductions(summary: &[SummaryRow]) -> Result<ReductionComparison> {
    let mut by_spec: BTreeMap<SignalSpec, f64> = BTreeMap::new();
    for row in summary.iter().filter(|r| r.is_ok()) {
        if let (Ok(spec), Some(s)) = (row.signal_id.parse::<SignalSpec>(), row.sparsity_at_1pct_drop) {
            by_spec.insert(spec, s);
        }
    }
    let mut pairs = Vec::new();
    for (spec, &sum_sparsity) in by_spec.iter().filter(|(s, _)| s.reduction == Reduction::Sum) {
        for &reduction in &Reduction::ALL[1..] {
            let alt = SignalSpec { reduction, ..*spec };
            if let Some(&alt_sparsity) = by_spec.get(&alt) {
                pairs.push(ReductionPair {
                    sum_signal: spec.id(),
                    alt_signal: alt.id(),
                    reduction,
                    improvement: alt_sparsity - sum_sparsity,
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty("matched sum/alternative reduction pairs"));
    }
    let means = Reduction::ALL[1..]
        .iter()
        .filter_map(|&r| {
            let v: Vec<f64> = pairs.iter().filter(|p| p.reduction == r).map(|p| p.improvement).collect();
            (!v.is_empty()).then(|| (r, v.len(), v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect();
    Ok(ReductionComparison { pairs, means })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainReportRow {
    pub signal_id: String,
    /// Sparsity at the 1%-drop point without retraining.
    pub no_retrain_sparsity: f64,
    /// Sparsity at the 1%-drop point with retraining.
    pub retrain_sparsity: f64,
    /// Cumulative retraining steps when sparsity first reached the target.
    pub retrain_steps_to_target: usize,
    pub total_retrain_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainReport {
    pub rows: Vec<RetrainReportRow>,
    pub warnings: Vec<String>,
}

/// Joins retrain-on and retrain-off sweeps for the signals whose
/// retrained 1%-drop sparsity reaches `min_sparsity`. `on_dir` holds the
/// per-signal step CSVs of the retrain-on sweep.
pub fn retrain_report(
    on: &[SummaryRow],
    off: &[SummaryRow],
    on_dir: &Path,
    min_sparsity: f64,
) -> Result<RetrainReport> {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for r in on.iter().filter(|r| r.is_ok()) {
        let Some(sp) = r.sparsity_at_1pct_drop else { continue };
        if sp + 1e-12 < min_sparsity {
            continue;
        }
        let Some(o) = off.iter().find(|o| o.signal_id == r.signal_id && o.is_ok()) else {
            warnings.push(format!("{}: no retrain-off result, skipped", r.signal_id));
            continue;
        };
        let steps = read_results_file(&on_dir.join(signal_file(&r.signal_id)))?;
        let Some(hit) = steps.iter().find(|s| s.sparsity + 1e-12 >= min_sparsity) else {
            warnings.push(format!("{}: step file never reaches sparsity {min_sparsity}", r.signal_id));
            continue;
        };
        rows.push(RetrainReportRow {
            signal_id: r.signal_id.clone(),
            no_retrain_sparsity: o.sparsity_at_1pct_drop.unwrap_or(0.0),
            retrain_sparsity: sp,
            retrain_steps_to_target: hit.cumulative_retrain_steps,
            total_retrain_steps: r.cumulative_retrain_steps.unwrap_or(0),
        });
    }
    Ok(RetrainReport { rows, warnings })
}

/// Ranks with ties sharing their average (1-based) rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks). `None` when fewer
/// than two points or either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
