//! Signal enumeration and the catalog of published signals.

use super::{BaseInput, HessianVariant, Pointwise, Reduction, Scaling, SignalSpec};
use crate::error::{Error, Result};

/// bases x pointwise variants (second-order metrics split by Hessian) x
/// reductions x scalings.
pub const FULL_GRID_SIZE: usize = 2 * 8 * 6 * 5;

/// Number of signals [`enumerate_signals`] returns with the default rules.
///
/// The grid has 480 points. Two rule sets remove combinations that collapse
/// onto an already listed signal for every input:
///
/// * `indicator_positive` takes values in {0, 1}, so `l1`, `abs_of_sum` and
///   `sum_of_squares` all equal `sum` (3 reductions x 2 bases x 5 scalings = 30);
/// * `taylor2_2nd_only.app2` is `x^2 g^2 / 2 >= 0`, so `l1` and `abs_of_sum`
///   equal `sum` (2 x 2 x 5 = 20).
pub const DEFAULT_SIGNAL_COUNT: usize = FULL_GRID_SIZE - 30 - 20;

/// Which provably redundant combinations to drop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidityRules {
    /// Drop reductions equal to `sum` for indicator outputs.
    pub dedup_indicator: bool,
    /// Drop `l1`/`abs_of_sum` for nonnegative pointwise metrics.
    pub dedup_nonnegative: bool,
}

impl Default for ValidityRules {
    fn default() -> Self {
        ValidityRules { dedup_indicator: true, dedup_nonnegative: true }
    }
}

impl ValidityRules {
    /// Keep the whole grid.
    pub fn none() -> Self {
        ValidityRules { dedup_indicator: false, dedup_nonnegative: false }
    }

    pub fn allows(&self, spec: &SignalSpec) -> bool {
        let r = spec.reduction;
        if self.dedup_indicator
            && spec.pointwise == Pointwise::IndicatorPositive
            && matches!(r, Reduction::L1 | Reduction::AbsOfSum | Reduction::SumOfSquares)
        {
            return false;
        }
        if self.dedup_nonnegative
            && spec.pointwise == Pointwise::Taylor2SecondOnly
            && spec.hessian == Some(HessianVariant::App2)
            && matches!(r, Reduction::L1 | Reduction::AbsOfSum)
        {
            return false;
        }
        true
    }
}

fn pointwise_variants() -> Vec<(Pointwise, Option<HessianVariant>)> {
    Pointwise::ALL
        .iter()
        .flat_map(|&p| {
            if p.uses_second_derivative() {
                HessianVariant::ALL.iter().map(|&h| (p, Some(h))).collect()
            } else {
                vec![(p, None)]
            }
        })
        .collect()
}

/// Every valid signal in a fixed order (base, pointwise, hessian, reduction,
/// scaling, each in declaration order).
pub fn enumerate_signals(rules: ValidityRules) -> Vec<SignalSpec> {
    let mut out = Vec::with_capacity(FULL_GRID_SIZE);
    for &base in BaseInput::ALL {
        for (pointwise, hessian) in pointwise_variants() {
            for &reduction in Reduction::ALL {
                for &scaling in Scaling::ALL {
                    let spec = SignalSpec { base, pointwise, hessian, reduction, scaling };
                    if rules.allows(&spec) {
                        out.push(spec);
                    }
                }
            }
        }
    }
    out
}

/// Names of the published signals, in catalog order.
pub const PUBLISHED_NAMES: [&str; 8] = [
    "L1-norm of weights",
    "Min-Weight",
    "APoZ",
    "Fisher Information",
    "1st Order Taylor",
    "1st Order Taylor, w. norm",
    "Average of gradient",
    "L2 norm of activations",
];

const PUBLISHED_IDS: [&str; 8] = [
    "weights.value.l1.none",
    "weights.value.sum_of_squares.cardinality",
    "activations.indicator_positive.sum.cardinality",
    // Published with L = 2; a constant scaling does not change any ranking.
    "activations.taylor1.square_of_sum.none",
    "activations.taylor1.abs_of_sum.cardinality",
    "activations.taylor1.abs_of_sum.layerwise_l2",
    "activations.gradient.sum.cardinality",
    "activations.value.l2.none",
];

/// `(name, spec)` for every published signal.
pub fn published_signals() -> Vec<(&'static str, SignalSpec)> {
    PUBLISHED_NAMES.iter().zip(PUBLISHED_IDS).map(|(&n, id)| (n, id.parse().expect("catalog ids are valid"))).collect()
}

/// Looks up a published signal by name (case-insensitive).
pub fn published_signal(name: &str) -> Result<SignalSpec> {
    published_signals().into_iter().find(|(n, _)| n.eq_ignore_ascii_case(name.trim())).map(|(_, s)| s).ok_or_else(
        || Error::UnknownSignal {
            name: name.to_string(),
            suggestions: PUBLISHED_NAMES.iter().map(|s| s.to_string()).collect(),
        },
    )
}

/// Resolves a signal id or a published name.
///
/// Unknown inputs yield an error with the closest known ids and names.
pub fn resolve_signal(name: &str) -> Result<SignalSpec> {
    if let Ok(spec) = name.parse::<SignalSpec>() {
        return Ok(spec);
    }
    if let Ok(spec) = published_signal(name) {
        return Ok(spec);
    }
    let mut candidates: Vec<(f64, String)> = enumerate_signals(ValidityRules::none())
        .iter()
        .map(SignalSpec::id)
        .chain(PUBLISHED_NAMES.iter().map(|s| s.to_string()))
        .map(|c| (strsim::jaro_winkler(&name.to_ascii_lowercase(), &c.to_ascii_lowercase()), c))
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    Err(Error::UnknownSignal {
        name: name.to_string(),
        suggestions: candidates.into_iter().take(3).map(|(_, c)| c).collect(),
    })
}
