//! Channel saliency as `S = R(F(X)) / L`.
//!
//! A [`SignalSpec`] picks one option on each of four axes: the base input
//! `X` (a channel's weights or its output feature map), the pointwise metric
//! `f`, the reduction `R` and the scaling `L`. `S~ = R(F(X))` is the reduced
//! value; layerwise scalings are computed from the `S~` of the other channels
//! of the same layer.
//!
//! Sign convention: Taylor terms use `-x dL/dx`, the first-order estimate of
//! the loss *increase* from zeroing `x`. Sign-insensitive reductions make
//! published rows written with `+x dL/dx` identical.
//!
//! Per-element derivative inputs:
//!
//! * weights: derivatives of the evaluation-set mean loss (batch records
//!   averaged with [`BatchAccumulator`]);
//! * activations: each sample's own loss derivatives, i.e. `n` times the
//!   batch-mean values for first and app1 second derivatives, `n^2` for
//!   app2. `X` is one sample's feature map; `S~` is averaged over samples.
//!
//! Masked weights are not part of `X` (nor of its cardinality); pruned
//! channels are excluded as candidates and count as `S~ = 0` in layerwise
//! denominators.

mod catalog;

pub use catalog::{
    enumerate_signals, published_signal, published_signals, resolve_signal, ValidityRules, DEFAULT_SIGNAL_COUNT,
    FULL_GRID_SIZE, PUBLISHED_NAMES,
};

use std::fmt;
use std::str::FromStr;

use crate::diff::{evaluate, ActivationRecord, BatchAccumulator, ParamTensors};
use crate::error::{Error, Result};
use crate::network::{Batch, ChannelId, LayerKind, NetworkGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaseInput {
    Weights,
    Activations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pointwise {
    /// `x`
    Value,
    /// `dL/dx`
    Gradient,
    /// `-x dL/dx`
    Taylor1,
    /// `-x dL/dx + x^2/2 d2L/dx2`
    Taylor2Full,
    /// `x^2/2 d2L/dx2`
    Taylor2SecondOnly,
    /// `1` if `x > 0`, else `0` (so `x == 0` scores `0`)
    IndicatorPositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HessianVariant {
    /// Layer-diagonal second-derivative back-propagation.
    App1,
    /// Squared gradient (Gauss-Newton diagonal).
    App2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reduction {
    Sum,
    L1,
    AbsOfSum,
    SumOfSquares,
    SquareOfSum,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scaling {
    None,
    Cardinality,
    LayerwiseL1,
    LayerwiseL2,
    WeightsRemoved,
}

macro_rules! named_enum {
    ($ty:ident { $($var:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$var),+];

            pub fn name(self) -> &'static str {
                match self { $($ty::$var => $name),+ }
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$var),)+
                    _ => Err(Error::InvalidSignal(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), s
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(BaseInput { Weights => "weights", Activations => "activations" });
named_enum!(Pointwise {
    Value => "value",
    Gradient => "gradient",
    Taylor1 => "taylor1",
    Taylor2Full => "taylor2_full",
    Taylor2SecondOnly => "taylor2_2nd_only",
    IndicatorPositive => "indicator_positive",
});
named_enum!(HessianVariant { App1 => "app1", App2 => "app2" });
named_enum!(Reduction {
    Sum => "sum",
    L1 => "l1",
    AbsOfSum => "abs_of_sum",
    SumOfSquares => "sum_of_squares",
    SquareOfSum => "square_of_sum",
    L2 => "l2",
});
named_enum!(Scaling {
    None => "none",
    Cardinality => "cardinality",
    LayerwiseL1 => "layerwise_l1",
    LayerwiseL2 => "layerwise_l2",
    WeightsRemoved => "weights_removed",
});

impl Pointwise {
    pub fn uses_gradient(self) -> bool {
        matches!(self, Pointwise::Gradient | Pointwise::Taylor1 | Pointwise::Taylor2Full)
    }

    pub fn uses_second_derivative(self) -> bool {
        matches!(self, Pointwise::Taylor2Full | Pointwise::Taylor2SecondOnly)
    }

    /// Evaluates `f(x)` given the first (`g1`) and second (`g2`) derivative
    /// of the loss with respect to `x`.
    pub fn eval(self, x: f64, g1: Option<f64>, g2: Option<f64>) -> Result<f64> {
        let g1 = || g1.ok_or(Error::MissingDerivative("a first derivative"));
        let g2 = || g2.ok_or(Error::MissingDerivative("a second derivative"));
        Ok(match self {
            Pointwise::Value => x,
            Pointwise::Gradient => g1()?,
            Pointwise::Taylor1 => -x * g1()?,
            Pointwise::Taylor2Full => -x * g1()? + 0.5 * x * x * g2()?,
            Pointwise::Taylor2SecondOnly => 0.5 * x * x * g2()?,
            Pointwise::IndicatorPositive => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        })
    }
}

impl Reduction {
    pub fn apply(self, values: &[f64]) -> Result<f64> {
        if values.is_empty() {
            return Err(Error::Empty("reduction input"));
        }
        let sum = || values.iter().sum::<f64>();
        let sum_sq = || values.iter().map(|v| v * v).sum::<f64>();
        Ok(match self {
            Reduction::Sum => sum(),
            Reduction::L1 => values.iter().map(|v| v.abs()).sum(),
            Reduction::AbsOfSum => sum().abs(),
            Reduction::SumOfSquares => sum_sq(),
            Reduction::SquareOfSum => {
                let s = sum();
                s * s
            }
            Reduction::L2 => sum_sq().sqrt(),
        })
    }
}

/// One point of the taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SignalSpec {
    pub base: BaseInput,
    pub pointwise: Pointwise,
    pub hessian: Option<HessianVariant>,
    pub reduction: Reduction,
    pub scaling: Scaling,
}

impl SignalSpec {
    /// Checks that a Hessian variant is given exactly when the pointwise
    /// metric uses a second derivative.
    pub fn new(
        base: BaseInput,
        pointwise: Pointwise,
        hessian: Option<HessianVariant>,
        reduction: Reduction,
        scaling: Scaling,
    ) -> Result<Self> {
        if pointwise.uses_second_derivative() != hessian.is_some() {
            return Err(Error::InvalidSignal(format!(
                "pointwise `{pointwise}` {} a Hessian variant",
                if hessian.is_some() { "does not take" } else { "requires" }
            )));
        }
        Ok(SignalSpec { base, pointwise, hessian, reduction, scaling })
    }

    /// Stable id: `base.pointwise[.hessian].reduction.scaling`.
    pub fn id(&self) -> String {
        self.to_string()
    }

    /// Whether evaluating the signal needs data (activations or any
    /// derivative).
    pub fn needs_data(&self) -> bool {
        self.base == BaseInput::Activations || self.pointwise.uses_gradient() || self.pointwise.uses_second_derivative()
    }

    pub fn uses_gradient_information(&self) -> bool {
        self.pointwise.uses_gradient() || self.pointwise.uses_second_derivative()
    }
}

impl fmt::Display for SignalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.base, self.pointwise)?;
        if let Some(h) = self.hessian {
            write!(f, ".{h}")?;
        }
        write!(f, ".{}.{}", self.reduction, self.scaling)
    }
}

impl FromStr for SignalSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('.').collect();
        let (base, pointwise, hessian, reduction, scaling) = match parts.as_slice() {
            [b, p, r, l] => (b, p, None, r, l),
            [b, p, h, r, l] => (b, p, Some(h.parse()?), r, l),
            _ => return Err(Error::InvalidSignal(format!("`{s}` is not base.pointwise[.hessian].reduction.scaling"))),
        };
        SignalSpec::new(base.parse()?, pointwise.parse()?, hessian, reduction.parse()?, scaling.parse()?)
    }
}

/// Free-function form of [`Pointwise::eval`].
pub fn pointwise_eval(spec: &SignalSpec, x: f64, g1: Option<f64>, g2: Option<f64>) -> Result<f64> {
    spec.pointwise.eval(x, g1, g2)
}

/// Free-function form of [`Reduction::apply`].
pub fn reduce(reduction: Reduction, values: &[f64]) -> Result<f64> {
    reduction.apply(values)
}

/// What a scaling may look at for one channel.
#[derive(Debug, Clone, Copy)]
pub struct ScaleContext<'a> {
    /// `card(X)`.
    pub cardinality: usize,
    /// `S~` of every channel of the layer (pruned channels as 0).
    pub layer_reduced: &'a [f64],
    /// Weights (and bias) that pruning this channel would zero.
    pub weights_removed: usize,
}

/// A scaling denominator; `fallback` marks a zero denominator replaced by 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Denominator {
    pub value: f64,
    pub fallback: bool,
}

pub fn scale_denominator(scaling: Scaling, ctx: &ScaleContext<'_>) -> Denominator {
    let value = match scaling {
        Scaling::None => 1.0,
        Scaling::Cardinality => ctx.cardinality as f64,
        Scaling::LayerwiseL1 => ctx.layer_reduced.iter().map(|v| v.abs()).sum(),
        Scaling::LayerwiseL2 => ctx.layer_reduced.iter().map(|v| v * v).sum::<f64>().sqrt(),
        Scaling::WeightsRemoved => ctx.weights_removed as f64,
    };
    if value == 0.0 || !value.is_finite() {
        Denominator { value: 1.0, fallback: true }
    } else {
        Denominator { value, fallback: false }
    }
}

/// Saliency of one unpruned channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSaliency {
    pub id: ChannelId,
    /// `S~ = R(F(X))`.
    pub reduced: f64,
    /// `L`.
    pub denominator: f64,
    /// `S = S~ / L`.
    pub saliency: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SaliencyMap {
    /// Unpruned channels of prunable layers, ordered by `(layer, channel)`.
    pub channels: Vec<ChannelSaliency>,
    /// Already-pruned channels; never candidates.
    pub excluded: Vec<ChannelId>,
    /// Layers whose denominator was zero and replaced by 1.
    pub fallback_layers: Vec<usize>,
}

impl SaliencyMap {
    pub fn get(&self, id: ChannelId) -> Option<&ChannelSaliency> {
        self.channels.iter().find(|c| c.id == id)
    }

    pub fn has_fallback(&self) -> bool {
        !self.fallback_layers.is_empty()
    }
}

/// Where activation-based signals read a channel's feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActivationTap {
    /// After the ReLU directly following the convolution (the map a
    /// downstream layer actually consumes); the conv output if no ReLU follows.
    #[default]
    PostNonlinearity,
    /// The raw convolution output.
    PreNonlinearity,
}

impl ActivationTap {
    pub fn layer(self, net: &NetworkGraph, conv: usize) -> usize {
        match self {
            ActivationTap::PostNonlinearity
                if net.layers().get(conv + 1).is_some_and(|l| l.spec.kind == LayerKind::Relu) =>
            {
                conv + 1
            }
            _ => conv,
        }
    }
}

impl FromStr for ActivationTap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post" => Ok(ActivationTap::PostNonlinearity),
            "pre" => Ok(ActivationTap::PreNonlinearity),
            _ => Err(Error::Config(format!("activation tap must be `post` or `pre`, got `{s}`"))),
        }
    }
}

/// `S~` per prunable layer, indexed by channel (0 for pruned channels).
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedValues {
    pub layers: Vec<(usize, Vec<f64>)>,
}

/// Computes `S~` for every unpruned channel from one derivative record.
///
/// `record` may be `None` for signals that need no data. For activation
/// signals it should be a single batch's record (not an elementwise average
/// across batches); `S~` is the mean over its samples.
pub fn reduced_values(
    net: &NetworkGraph,
    record: Option<&ActivationRecord>,
    spec: &SignalSpec,
    tap: ActivationTap,
) -> Result<ReducedValues> {
    if spec.needs_data() && record.is_none() {
        return Err(Error::MissingDerivative("a derivative record"));
    }
    let mut layers = Vec::new();
    for l in net.prunable_layers() {
        let m = net.layer(l).spec.out_channels;
        let mut values = vec![0.0; m];
        match spec.base {
            BaseInput::Weights => weight_reduced(net, record, spec, l, &mut values)?,
            BaseInput::Activations => {
                activation_reduced(net, record.expect("checked above"), spec, tap, l, &mut values)?
            }
        }
        layers.push((l, values));
    }
    Ok(ReducedValues { layers })
}

fn param_of<'a>(set: Option<&'a crate::diff::ParamSet>, l: usize, what: &'static str) -> Result<&'a ParamTensors> {
    set.and_then(|s| s.get(l)).and_then(Option::as_ref).ok_or(Error::MissingDerivative(what))
}

fn weight_reduced(
    net: &NetworkGraph,
    record: Option<&ActivationRecord>,
    spec: &SignalSpec,
    l: usize,
    out: &mut [f64],
) -> Result<()> {
    let layer = net.layer(l);
    let w = layer.weight.as_ref().expect("conv has weights");
    let block = w.len() / layer.spec.out_channels;
    let wmask = net.weight_mask(l);
    let grad = if spec.pointwise.uses_gradient() {
        Some(param_of(record.and_then(|r| r.param_grad.as_ref()), l, "weight gradients")?)
    } else {
        None
    };
    let hess = match spec.hessian {
        Some(HessianVariant::App1) => {
            Some(param_of(record.and_then(|r| r.param_hess_app1.as_ref()), l, "app1 weight second derivatives")?)
        }
        Some(HessianVariant::App2) => {
            Some(param_of(record.and_then(|r| r.param_hess_app2.as_ref()), l, "app2 weight second derivatives")?)
        }
        None => None,
    };
    let mut f = Vec::with_capacity(block);
    for (i, slot) in out.iter_mut().enumerate() {
        if net.mask().is_pruned(l, i) {
            continue;
        }
        f.clear();
        for idx in i * block..(i + 1) * block {
            if wmask.as_ref().is_some_and(|m| m[idx]) {
                continue;
            }
            let g1 = grad.map(|g| g.weight.data()[idx]);
            let g2 = hess.map(|h| h.weight.data()[idx]);
            f.push(spec.pointwise.eval(w.data()[idx], g1, g2)?);
        }
        *slot = spec.reduction.apply(&f)?;
    }
    Ok(())
}

fn activation_reduced(
    net: &NetworkGraph,
    record: &ActivationRecord,
    spec: &SignalSpec,
    tap: ActivationTap,
    l: usize,
    out: &mut [f64],
) -> Result<()> {
    let t = tap.layer(net, l);
    let acts = record.activations.get(t).ok_or(Error::MissingPass("the forward pass"))?;
    let [n, c, h, w] = acts.dims4(Some(t))?;
    let hw = h * w;
    let nf = n as f64;
    let grad = if spec.pointwise.uses_gradient() {
        Some(record.act_grad.as_ref().ok_or(Error::MissingDerivative("activation gradients"))?[t].data())
    } else {
        None
    };
    let (hess, hess_factor) = match spec.hessian {
        Some(HessianVariant::App1) => (
            Some(
                record.act_hess_app1.as_ref().ok_or(Error::MissingDerivative("app1 activation second derivatives"))?[t]
                    .data(),
            ),
            nf,
        ),
        Some(HessianVariant::App2) => (
            Some(
                record.act_hess_app2.as_ref().ok_or(Error::MissingDerivative("app2 activation second derivatives"))?[t]
                    .data(),
            ),
            nf * nf,
        ),
        None => (None, 1.0),
    };
    let mut f = vec![0.0; hw];
    for (i, slot) in out.iter_mut().enumerate().take(c) {
        if net.mask().is_pruned(l, i) {
            continue;
        }
        let mut total = 0.0;
        for b in 0..n {
            let base = (b * c + i) * hw;
            for (j, fj) in f.iter_mut().enumerate() {
                let idx = base + j;
                let g1 = grad.map(|g| g[idx] * nf);
                let g2 = hess.map(|h| h[idx] * hess_factor);
                *fj = spec.pointwise.eval(acts.data()[idx], g1, g2)?;
            }
            total += spec.reduction.apply(&f)?;
        }
        *slot = total / nf;
    }
    Ok(())
}

/// Number of weights and biases zeroing channel `id` would newly mask: its
/// live filter weights, its bias and the live input slices of every
/// consumer.
pub fn weights_removed(net: &NetworkGraph, id: ChannelId) -> usize {
    let layer = net.layer(id.layer);
    let Some(w) = layer.weight.as_ref() else { return 0 };
    let block = w.len() / layer.spec.out_channels;
    let own_mask = net.weight_mask(id.layer);
    let own =
        (id.channel * block..(id.channel + 1) * block).filter(|&i| !own_mask.as_ref().is_some_and(|m| m[i])).count();
    let bias = usize::from(layer.bias.is_some() && !net.mask().is_pruned(id.layer, id.channel));
    let consumers: usize = net
        .consumers(id.layer)
        .iter()
        .map(|c| {
            let cl = net.layer(c.layer);
            let [m, cin, k, _] = cl.weight.as_ref().expect("consumer has weights").dims4(None).expect("rank 4");
            let mask = net.weight_mask(c.layer);
            let kk = k * k;
            let mut count = 0;
            for o in 0..m {
                for ci in id.channel * c.group..(id.channel + 1) * c.group {
                    let base = (o * cin + ci) * kk;
                    count += (base..base + kk).filter(|&i| !mask.as_ref().is_some_and(|mk| mk[i])).count();
                }
            }
            count
        })
        .sum();
    own + bias + consumers
}

/// `card(X)` for a channel of conv layer `l`.
pub fn cardinality(net: &NetworkGraph, spec: &SignalSpec, id: ChannelId, tap: ActivationTap) -> usize {
    match spec.base {
        BaseInput::Weights => {
            let layer = net.layer(id.layer);
            let block = layer.weight.as_ref().map_or(0, |w| w.len() / layer.spec.out_channels);
            let mask = net.weight_mask(id.layer);
            (id.channel * block..(id.channel + 1) * block).filter(|&i| !mask.as_ref().is_some_and(|m| m[i])).count()
        }
        BaseInput::Activations => {
            let [_, h, w] = net.layer(tap.layer(net, id.layer)).out_shape;
            h * w
        }
    }
}

/// Applies the scaling to reduced values, producing the final map.
pub fn scale_reduced(
    net: &NetworkGraph,
    reduced: &ReducedValues,
    spec: &SignalSpec,
    tap: ActivationTap,
) -> SaliencyMap {
    let mut map = SaliencyMap::default();
    for (l, values) in &reduced.layers {
        let mut fallback = false;
        for (i, &v) in values.iter().enumerate() {
            let id = ChannelId::new(*l, i);
            if net.mask().is_pruned(*l, i) {
                map.excluded.push(id);
                continue;
            }
            let ctx = ScaleContext {
                cardinality: cardinality(net, spec, id, tap),
                layer_reduced: values,
                weights_removed: if spec.scaling == Scaling::WeightsRemoved { weights_removed(net, id) } else { 0 },
            };
            let d = scale_denominator(spec.scaling, &ctx);
            fallback |= d.fallback;
            map.channels.push(ChannelSaliency { id, reduced: v, denominator: d.value, saliency: v / d.value });
        }
        if fallback {
            map.fallback_layers.push(*l);
        }
    }
    map
}

/// Saliency of every unpruned channel of every prunable layer, from one
/// derivative record (see [`reduced_values`]).
pub fn channel_saliency(
    net: &NetworkGraph,
    record: Option<&ActivationRecord>,
    spec: &SignalSpec,
    tap: ActivationTap,
) -> Result<SaliencyMap> {
    let reduced = reduced_values(net, record, spec, tap)?;
    Ok(scale_reduced(net, &reduced, spec, tap))
}

/// Evaluates `spec` over a set of evaluation batches.
///
/// Weight signals use the batch-averaged derivative record; activation
/// signals average per-sample `S~` over all samples of all batches.
pub fn evaluate_signal(
    net: &NetworkGraph,
    spec: &SignalSpec,
    batches: &[Batch],
    tap: ActivationTap,
) -> Result<SaliencyMap> {
    if !spec.needs_data() {
        return channel_saliency(net, None, spec, tap);
    }
    if batches.is_empty() {
        return Err(Error::Empty("evaluation batches"));
    }
    let app1 = spec.hessian == Some(HessianVariant::App1);
    let app2 = spec.hessian == Some(HessianVariant::App2);
    match spec.base {
        BaseInput::Weights => {
            let mut acc = BatchAccumulator::new();
            for batch in batches {
                acc.accumulate(&evaluate(net, batch, app1, app2)?)?;
            }
            channel_saliency(net, Some(&acc.read_average()?), spec, tap)
        }
        BaseInput::Activations => {
            let mut total: Option<ReducedValues> = None;
            let mut samples = 0usize;
            for batch in batches {
                let rec = if spec.uses_gradient_information() {
                    evaluate(net, batch, app1, app2)?
                } else {
                    net.forward(batch)?
                };
                let n = rec.batch_size();
                let r = reduced_values(net, Some(&rec), spec, tap)?;
                samples += n;
                match &mut total {
                    None => {
                        let mut r = r;
                        r.layers.iter_mut().for_each(|(_, v)| v.iter_mut().for_each(|x| *x *= n as f64));
                        total = Some(r);
                    }
                    Some(t) => {
                        for ((_, acc), (_, v)) in t.layers.iter_mut().zip(&r.layers) {
                            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b * n as f64);
                        }
                    }
                }
            }
            let mut total = total.expect("at least one batch");
            total.layers.iter_mut().for_each(|(_, v)| v.iter_mut().for_each(|x| *x /= samples as f64));
            Ok(scale_reduced(net, &total, spec, tap))
        }
    }
}
