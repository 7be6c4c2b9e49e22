//! Small CNNs as linear chains of layers.
//!
//! Dense layers are stored as `[out, in, 1, 1]` kernels and evaluated as
//! 1x1 convolutions over a `[n, in, 1, 1]` input, so the same kernels and
//! the same channel-wiring rules cover both. Output channels of convolution
//! layers are the pruning unit; the mask lives on the network, and forward
//! evaluation reads weights through it, so values stored at masked positions
//! never influence any output.

use std::borrow::Cow;

use rand::Rng;

use crate::diff::ActivationRecord;
use crate::error::{Error, Result};
use crate::tensor::{conv_forward, ConvGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Relu,
    MaxPool,
    Gap,
    Dense,
    Flatten,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Gap => "gap",
            LayerKind::Dense => "dense",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn has_params(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Dense)
    }
}

/// Static description of one layer.
///
/// For parameterless layers `in_channels`/`out_channels` are filled in by
/// shape inference when the network is built; `kernel`/`stride` describe the
/// pooling window for `MaxPool`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerSpec { kind: LayerKind::Conv, in_channels, out_channels, kernel, stride, pad, has_bias: true }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            in_channels: in_features,
            out_channels: out_features,
            kernel: 1,
            stride: 1,
            pad: 0,
            has_bias: true,
        }
    }

    pub fn relu() -> Self {
        Self::parameterless(LayerKind::Relu, 1, 1)
    }

    pub fn max_pool(size: usize, stride: usize) -> Self {
        Self::parameterless(LayerKind::MaxPool, size, stride)
    }

    pub fn gap() -> Self {
        Self::parameterless(LayerKind::Gap, 1, 1)
    }

    pub fn flatten() -> Self {
        Self::parameterless(LayerKind::Flatten, 1, 1)
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    fn parameterless(kind: LayerKind, kernel: usize, stride: usize) -> Self {
        LayerSpec { kind, in_channels: 0, out_channels: 0, kernel, stride, pad: 0, has_bias: false }
    }
}

/// One live layer: its spec, parameters and the inferred per-sample shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    /// `[c, h, w]` of the layer input.
    pub in_shape: [usize; 3],
    /// `[c, h, w]` of the layer output.
    pub out_shape: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

/// Targets of a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self> {
        let [n, ..] = inputs.dims4(None)?;
        let m = match &targets {
            Targets::Labels(l) => l.len(),
            Targets::Values(t) => t.shape()[0],
        };
        if m != n {
            return Err(Error::shape(None, format!("batch has {n} inputs but {m} targets")));
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A convolution output channel `(layer, channel)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelId {
    pub layer: usize,
    pub channel: usize,
}

impl ChannelId {
    pub fn new(layer: usize, channel: usize) -> Self {
        ChannelId { layer, channel }
    }
}

impl std::fmt::Display for ChannelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.layer, self.channel)
    }
}

/// A downstream layer reading a producer's output channels.
///
/// Producer channel `i` feeds the consumer's input features
/// `i*group .. (i+1)*group` (`group > 1` when a flatten sits in between).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Consumer {
    pub layer: usize,
    pub group: usize,
}

/// Pruned output channels per convolution layer (`true` = pruned).
///
/// Input-channel masks of consumers are derived from these through
/// [`NetworkGraph::consumers`], so the two can never disagree.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PruneMask {
    layers: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn empty_for(layers: &[Layer]) -> Self {
        PruneMask {
            layers: layers
                .iter()
                .map(|l| match l.spec.kind {
                    LayerKind::Conv => vec![false; l.spec.out_channels],
                    _ => Vec::new(),
                })
                .collect(),
        }
    }

    pub fn is_pruned(&self, layer: usize, channel: usize) -> bool {
        self.layers.get(layer).and_then(|m| m.get(channel)).copied().unwrap_or(false)
    }

    /// Output-channel mask of `layer` (empty for non-conv layers).
    pub fn channels(&self, layer: usize) -> &[bool] {
        self.layers.get(layer).map_or(&[], Vec::as_slice)
    }

    pub fn pruned_in_layer(&self, layer: usize) -> usize {
        self.channels(layer).iter().filter(|&&p| p).count()
    }

    pub fn total_pruned(&self) -> usize {
        self.layers.iter().flatten().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        self.total_pruned() == 0
    }

    pub(crate) fn set(&mut self, layer: usize, channel: usize) {
        self.layers[layer][channel] = true;
    }

    pub(crate) fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// A linear chain of layers with a loss on top.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    loss: LossKind,
    mask: PruneMask,
}

impl NetworkGraph {
    /// Builds a network with zero-initialised parameters, checking shape
    /// consistency along the chain.
    pub fn new(input_shape: [usize; 3], specs: &[LayerSpec], loss: LossKind) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Empty("network has no layers"));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape;
        for (l, spec) in specs.iter().enumerate() {
            let mut spec = *spec;
            let [c, h, w] = shape;
            let out = match spec.kind {
                LayerKind::Conv => {
                    check_conv_spec(l, &spec, c)?;
                    if h + 2 * spec.pad < spec.kernel || w + 2 * spec.pad < spec.kernel {
                        return Err(Error::shape(
                            Some(l),
                            format!("kernel {} exceeds padded input {h}x{w}", spec.kernel),
                        ));
                    }
                    [
                        spec.out_channels,
                        (h + 2 * spec.pad - spec.kernel) / spec.stride + 1,
                        (w + 2 * spec.pad - spec.kernel) / spec.stride + 1,
                    ]
                }
                LayerKind::Dense => {
                    if h != 1 || w != 1 {
                        return Err(Error::shape(Some(l), format!("dense input must be flat, got spatial {h}x{w}")));
                    }
                    check_conv_spec(l, &spec, c)?;
                    [spec.out_channels, 1, 1]
                }
                LayerKind::Relu => [c, h, w],
                LayerKind::MaxPool => {
                    if spec.kernel == 0 || spec.stride == 0 || spec.kernel > h || spec.kernel > w {
                        return Err(Error::shape(Some(l), format!("pool window {} invalid for {h}x{w}", spec.kernel)));
                    }
                    [c, (h - spec.kernel) / spec.stride + 1, (w - spec.kernel) / spec.stride + 1]
                }
                LayerKind::Gap => [c, 1, 1],
                LayerKind::Flatten => [c * h * w, 1, 1],
            };
            if !spec.kind.has_params() {
                spec.in_channels = c;
                spec.out_channels = out[0];
            }
            let (weight, bias) = if spec.kind.has_params() {
                let k = spec.kernel;
                let weight = Tensor::zeros(&[spec.out_channels, spec.in_channels, k, k]);
                let bias = spec.has_bias.then(|| Tensor::zeros(&[spec.out_channels]));
                (Some(weight), bias)
            } else {
                (None, None)
            };
            layers.push(Layer { spec, weight, bias, in_shape: shape, out_shape: out });
            shape = out;
        }
        if loss == LossKind::SoftmaxCrossEntropy && (shape[1] != 1 || shape[2] != 1) {
            return Err(Error::shape(
                Some(specs.len() - 1),
                format!("classifier output must be [classes, 1, 1], got {shape:?}"),
            ));
        }
        let mask = PruneMask::empty_for(&layers);
        Ok(NetworkGraph { input_shape, layers, loss, mask })
    }

    /// He-uniform weights, zero biases.
    pub fn init_params<R: Rng>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            if let Some(w) = &mut layer.weight {
                let fan_in = (layer.spec.in_channels * layer.spec.kernel * layer.spec.kernel) as f64;
                let bound = (6.0 / fan_in).sqrt();
                for v in w.data_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
            if let Some(b) = &mut layer.bias {
                b.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.layers.last().map_or(self.input_shape, |l| l.out_shape)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &Layer {
        &self.layers[l]
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn mask(&self) -> &PruneMask {
        &self.mask
    }

    pub(crate) fn set_mask(&mut self, mask: PruneMask) -> Result<()> {
        if mask.num_layers() != self.layers.len()
            || self.layers.iter().enumerate().any(|(l, layer)| {
                mask.channels(l).len() != if layer.spec.kind == LayerKind::Conv { layer.spec.out_channels } else { 0 }
            })
        {
            return Err(Error::shape(None, "mask does not match the network layout"));
        }
        self.mask = mask;
        Ok(())
    }

    pub(crate) fn mark_pruned(&mut self, layer: usize, channel: usize) {
        self.mask.set(layer, channel);
    }

    /// Mutable access to a layer's weight tensor. Values written at masked
    /// positions are ignored by evaluation.
    pub fn weight_mut(&mut self, l: usize) -> Option<&mut Tensor> {
        self.layers[l].weight.as_mut()
    }

    pub fn bias_mut(&mut self, l: usize) -> Option<&mut Tensor> {
        self.layers[l].bias.as_mut()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_ref().map_or(0, Tensor::len) + l.bias.as_ref().map_or(0, Tensor::len))
            .sum()
    }

    /// Indices of convolution layers, in order.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.spec.kind == LayerKind::Conv).map(|(i, _)| i).collect()
    }

    /// Convolution layers whose channels can be pruned: those with at least
    /// one downstream consumer (an output-producing conv is not prunable).
    pub fn prunable_layers(&self) -> Vec<usize> {
        self.conv_layers().into_iter().filter(|&l| !self.consumers(l).is_empty()).collect()
    }

    /// Downstream parameter layers reading the output channels of layer `l`.
    /// In a linear chain this is the next conv or dense layer.
    pub fn consumers(&self, l: usize) -> Vec<Consumer> {
        let mut group = 1;
        for (j, layer) in self.layers.iter().enumerate().skip(l + 1) {
            match layer.spec.kind {
                LayerKind::Conv | LayerKind::Dense => return vec![Consumer { layer: j, group }],
                LayerKind::Flatten => group *= layer.in_shape[1] * layer.in_shape[2],
                LayerKind::Relu | LayerKind::MaxPool | LayerKind::Gap => {}
            }
        }
        Vec::new()
    }

    /// The conv layer whose output channels feed parameter layer `l`, if any.
    pub fn producer(&self, l: usize) -> Option<(usize, usize)> {
        self.conv_layers()
            .into_iter()
            .filter(|&p| p < l)
            .find_map(|p| self.consumers(p).iter().find(|c| c.layer == l).map(|c| (p, c.group)))
    }

    /// Elementwise mask over layer `l`'s weight tensor (`true` = masked):
    /// pruned output channels plus input slices of pruned producer channels.
    pub fn weight_mask(&self, l: usize) -> Option<Vec<bool>> {
        let layer = &self.layers[l];
        let w = layer.weight.as_ref()?;
        let [m, c, k, _] = w.dims4(Some(l)).ok()?;
        let kk = k * k;
        let mut mask = vec![false; w.len()];
        let mut any = false;
        for o in 0..m {
            if self.mask.is_pruned(l, o) {
                mask[o * c * kk..(o + 1) * c * kk].iter_mut().for_each(|v| *v = true);
                any = true;
            }
        }
        if let Some((p, group)) = self.producer(l) {
            for (pc, &pruned) in self.mask.channels(p).iter().enumerate() {
                if !pruned {
                    continue;
                }
                any = true;
                for o in 0..m {
                    for ci in pc * group..(pc + 1) * group {
                        let base = (o * c + ci) * kk;
                        mask[base..base + kk].iter_mut().for_each(|v| *v = true);
                    }
                }
            }
        }
        any.then_some(mask)
    }

    /// Mask over layer `l`'s bias (`true` = masked).
    pub fn bias_mask(&self, l: usize) -> Option<Vec<bool>> {
        let b = self.layers[l].bias.as_ref()?;
        let ch = self.mask.channels(l);
        ch.iter().any(|&p| p).then(|| (0..b.len()).map(|o| ch.get(o).copied().unwrap_or(false)).collect())
    }

    /// Parameters of layer `l` as seen by evaluation (masked entries zero).
    pub fn effective_params(&self, l: usize) -> (Option<Cow<'_, Tensor>>, Option<Cow<'_, Tensor>>) {
        let layer = &self.layers[l];
        let weight = layer.weight.as_ref().map(|w| match self.weight_mask(l) {
            Some(mask) => Cow::Owned(apply_mask(w, &mask)),
            None => Cow::Borrowed(w),
        });
        let bias = layer.bias.as_ref().map(|b| match self.bias_mask(l) {
            Some(mask) => Cow::Owned(apply_mask(b, &mask)),
            None => Cow::Borrowed(b),
        });
        (weight, bias)
    }

    /// Writes exact zeros into every masked weight and bias.
    pub fn zero_masked(&mut self) {
        for l in 0..self.layers.len() {
            let wm = self.weight_mask(l);
            let bm = self.bias_mask(l);
            let layer = &mut self.layers[l];
            if let (Some(w), Some(m)) = (&mut layer.weight, wm) {
                zero_at(w, &m);
            }
            if let (Some(b), Some(m)) = (&mut layer.bias, bm) {
                zero_at(b, &m);
            }
        }
    }

    fn check_input(&self, inputs: &Tensor) -> Result<usize> {
        let [n, c, h, w] = inputs.dims4(Some(0))?;
        if [c, h, w] != self.input_shape {
            return Err(Error::shape(
                Some(0),
                format!("input sample shape {:?} != network input {:?}", [c, h, w], self.input_shape),
            ));
        }
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        Ok(n)
    }

    /// Evaluates layer `l` on `input`.
    pub fn layer_forward(&self, l: usize, input: &Tensor) -> Result<Tensor> {
        let layer = &self.layers[l];
        let spec = &layer.spec;
        let [n, c, h, w] = input.dims4(Some(l))?;
        if [c, h, w] != layer.in_shape {
            return Err(Error::shape(Some(l), format!("input {:?} != declared {:?}", [c, h, w], layer.in_shape)));
        }
        let out = match spec.kind {
            LayerKind::Conv | LayerKind::Dense => {
                let (weight, bias) = self.effective_params(l);
                let weight = weight.expect("parameter layer has weights");
                let geo = ConvGeometry::new(input.shape(), weight.shape(), spec.stride, spec.pad, Some(l))?;
                conv_forward(&geo, input.data(), weight.data(), bias.as_deref().map(Tensor::data))
            }
            LayerKind::Relu => input.map(|v| if v > 0.0 { v } else { 0.0 }),
            LayerKind::MaxPool => {
                let [oc, oh, ow] = layer.out_shape;
                let mut out = Tensor::zeros(&[n, oc, oh, ow]);
                let src = input.data();
                for (o, v) in out.data_mut().iter_mut().enumerate() {
                    *v = src[pool_argmax(layer, o, src)];
                }
                out
            }
            LayerKind::Gap => {
                let hw = h * w;
                let mut out = Tensor::zeros(&[n, c, 1, 1]);
                for (o, v) in out.data_mut().iter_mut().enumerate() {
                    *v = input.data()[o * hw..(o + 1) * hw].iter().sum::<f64>() / hw as f64;
                }
                out
            }
            LayerKind::Flatten => input.clone().reshape(&[n, c * h * w, 1, 1])?,
        };
        if !out.all_finite() {
            return Err(Error::NonFinite { layer: l });
        }
        Ok(out)
    }

    /// Network output without recording intermediate activations.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        self.check_input(inputs)?;
        let mut x = Cow::Borrowed(inputs);
        for l in 0..self.layers.len() {
            x = Cow::Owned(self.layer_forward(l, &x)?);
        }
        Ok(x.into_owned())
    }

    /// Runs the whole chain, keeping every layer output and the batch-mean
    /// loss.
    pub fn forward(&self, batch: &Batch) -> Result<ActivationRecord> {
        let n = self.check_input(&batch.inputs)?;
        let mut activations: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let out = self.layer_forward(l, activations.last().unwrap_or(&batch.inputs))?;
            activations.push(out);
        }
        let loss = self.loss_value(activations.last().expect("non-empty"), &batch.targets)?;
        debug_assert_eq!(activations[0].shape()[0], n);
        Ok(ActivationRecord::from_forward(batch.inputs.clone(), batch.targets.clone(), activations, loss))
    }

    /// Loss when layers `start..` are evaluated on `x` (the input of layer
    /// `start`). Used by finite-difference checks on activations.
    pub fn loss_from(&self, start: usize, x: &Tensor, targets: &Targets) -> Result<f64> {
        let mut x = Cow::Borrowed(x);
        for l in start..self.layers.len() {
            x = Cow::Owned(self.layer_forward(l, &x)?);
        }
        self.loss_value(&x, targets)
    }

    /// Batch-mean loss of network `output` against `targets`.
    ///
    /// Softmax cross-entropy: `mean_b(logsumexp(z_b) - z_b[y_b])`.
    /// Squared error: `mean_b(0.5 * sum_j (y_bj - t_bj)^2)`.
    pub fn loss_value(&self, output: &Tensor, targets: &Targets) -> Result<f64> {
        let last = self.layers.len() - 1;
        let [n, k, ..] = output.dims4(Some(last))?;
        let loss = match (self.loss, targets) {
            (LossKind::SoftmaxCrossEntropy, Targets::Labels(labels)) => {
                if labels.len() != n {
                    return Err(Error::shape(Some(last), format!("{} labels for {n} samples", labels.len())));
                }
                let mut total = 0.0;
                for (b, &y) in labels.iter().enumerate() {
                    if y >= k {
                        return Err(Error::shape(Some(last), format!("label {y} out of range for {k} classes")));
                    }
                    let z = &output.data()[b * k..(b + 1) * k];
                    total += log_sum_exp(z) - z[y];
                }
                total / n as f64
            }
            (LossKind::MeanSquaredError, Targets::Values(t)) => {
                if t.shape() != output.shape() {
                    return Err(Error::shape(
                        Some(last),
                        format!("target {:?} vs output {:?}", t.shape(), output.shape()),
                    ));
                }
                let sq: f64 = output.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                0.5 * sq / n as f64
            }
            _ => return Err(Error::shape(Some(last), "targets do not match the loss kind")),
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { layer: last });
        }
        Ok(loss)
    }
}

fn check_conv_spec(l: usize, spec: &LayerSpec, in_c: usize) -> Result<()> {
    if spec.out_channels == 0 || spec.kernel == 0 || spec.stride == 0 {
        return Err(Error::shape(Some(l), "out_channels, kernel and stride must be positive"));
    }
    if spec.in_channels != in_c {
        return Err(Error::shape(Some(l), format!("declares {} input channels but receives {in_c}", spec.in_channels)));
    }
    Ok(())
}

/// Flat input index of the maximum inside the window of pooled output `o`.
/// Ties go to the first element in row-major window order.
pub(crate) fn pool_argmax(layer: &Layer, o: usize, src: &[f64]) -> usize {
    let [c, h, w] = layer.in_shape;
    let [_, oh, ow] = layer.out_shape;
    let (k, s) = (layer.spec.kernel, layer.spec.stride);
    let ox = o % ow;
    let oy = (o / ow) % oh;
    let plane = o / (ow * oh); // b * c + channel
    debug_assert!(plane < src.len() / (h * w) && c > 0);
    let base = plane * h * w;
    let mut best = base + (oy * s) * w + ox * s;
    for i in 0..k {
        for j in 0..k {
            let idx = base + (oy * s + i) * w + ox * s + j;
            if src[idx] > src[best] {
                best = idx;
            }
        }
    }
    best
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn apply_mask(t: &Tensor, mask: &[bool]) -> Tensor {
    let mut out = t.clone();
    zero_at(&mut out, mask);
    out
}

fn zero_at(t: &mut Tensor, mask: &[bool]) {
    for (v, &m) in t.data_mut().iter_mut().zip(mask) {
        if m {
            *v = 0.0;
        }
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy over a stream of batches. Ties in the logits resolve to the
/// lowest class index.
pub fn accuracy<'a>(net: &NetworkGraph, batches: impl IntoIterator<Item = &'a Batch>) -> Result<f64> {
    if net.loss_kind() != LossKind::SoftmaxCrossEntropy {
        return Err(Error::Config("accuracy requires a classification loss".into()));
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for batch in batches {
        let Targets::Labels(labels) = &batch.targets else {
            return Err(Error::shape(None, "accuracy requires class labels"));
        };
        let out = net.predict(&batch.inputs)?;
        let k = out.shape()[1];
        for (b, &y) in labels.iter().enumerate() {
            if argmax(&out.data()[b * k..(b + 1) * k]) == y {
                correct += 1;
            }
        }
        total += labels.len();
    }
    if total == 0 {
        return Err(Error::Empty("accuracy dataset"));
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_net(weights: &[f64], classes: usize, features: usize, loss: LossKind) -> NetworkGraph {
        let mut net =
            NetworkGraph::new([features, 1, 1], &[LayerSpec::dense(features, classes).without_bias()], loss).unwrap();
        net.weight_mut(0).unwrap().data_mut().copy_from_slice(weights);
        net
    }

    #[test]
    fn identity_dense_mse_is_zero() {
        let net = dense_net(&[1.0, 0.0, 0.0, 1.0], 2, 2, LossKind::MeanSquaredError);
        let x = Tensor::new(vec![3, 2, 1, 1], vec![1.0, -2.0, 0.5, 3.0, 0.0, 7.0]).unwrap();
        let batch = Batch::new(x.clone(), Targets::Values(x)).unwrap();
        assert_eq!(net.forward(&batch).unwrap().loss, 0.0);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let net = dense_net(&[0.0; 20], 10, 2, LossKind::SoftmaxCrossEntropy);
        let x = Tensor::from_fn(&[4, 2, 1, 1], |i| i as f64);
        let batch = Batch::new(x, Targets::Labels(vec![0, 3, 9, 5])).unwrap();
        let loss = net.forward(&batch).unwrap().loss;
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut net = NetworkGraph::new(
            [1, 6, 6],
            &[
                LayerSpec::conv(1, 3, 3, 1, 0),
                LayerSpec::relu(),
                LayerSpec::max_pool(2, 2),
                LayerSpec::flatten(),
                LayerSpec::dense(12, 4),
            ],
            LossKind::SoftmaxCrossEntropy,
        )
        .unwrap();
        use rand::SeedableRng;
        net.init_params(&mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        let x = Tensor::from_fn(&[5, 1, 6, 6], |i| ((i * 37) % 19) as f64 / 7.0 - 1.0);
        let batch = Batch::new(x, Targets::Labels(vec![0, 1, 2, 3, 0])).unwrap();
        let a = net.forward(&batch).unwrap().loss;
        let b = net.forward(&batch).unwrap().loss;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn accuracy_counts_correct_and_breaks_ties_low() {
        // Logits equal the inputs, so the argmax is chosen by hand.
        let net = dense_net(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, 3, LossKind::SoftmaxCrossEntropy);
        let x = Tensor::new(
            vec![3, 3, 1, 1],
            vec![
                0.1, 0.9, 0.0, // -> 1
                2.0, 2.0, 1.0, // tie -> 0
                0.0, 0.0, 0.5, // -> 2
            ],
        )
        .unwrap();
        let batch = Batch::new(x, Targets::Labels(vec![1, 1, 2])).unwrap();
        // Hand count: samples 0 and 2 correct, sample 1 predicted 0.
        assert!((accuracy(&net, [&batch]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_logits_predict_class_zero() {
        let net = dense_net(&[0.0; 10], 10, 1, LossKind::SoftmaxCrossEntropy);
        let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
        let x = Tensor::from_fn(&[50, 1, 1, 1], |i| i as f64);
        let batch = Batch::new(x, Targets::Labels(labels)).unwrap();
        assert!((accuracy(&net, [&batch]).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn perfect_logits_score_one() {
        let net = dense_net(&[5.0, 0.0, 0.0, 5.0], 2, 2, LossKind::SoftmaxCrossEntropy);
        let x = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let batch = Batch::new(x, Targets::Labels(vec![0, 1])).unwrap();
        assert_eq!(accuracy(&net, [&batch]).unwrap(), 1.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let net = dense_net(&[0.0; 4], 2, 2, LossKind::SoftmaxCrossEntropy);
        assert!(accuracy(&net, std::iter::empty()).is_err());
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let err = NetworkGraph::new(
            [1, 8, 8],
            &[LayerSpec::conv(1, 4, 3, 1, 0), LayerSpec::conv(3, 2, 3, 1, 0)],
            LossKind::MeanSquaredError,
        )
        .unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn flatten_wiring_groups_spatial_positions() {
        let net = NetworkGraph::new(
            [1, 6, 6],
            &[LayerSpec::conv(1, 3, 3, 1, 0), LayerSpec::max_pool(2, 2), LayerSpec::flatten(), LayerSpec::dense(12, 2)],
            LossKind::SoftmaxCrossEntropy,
        )
        .unwrap();
        assert_eq!(net.consumers(0), vec![Consumer { layer: 3, group: 4 }]);
        assert_eq!(net.producer(3), Some((0, 4)));
        assert!(net.consumers(3).is_empty());
    }

    #[test]
    fn max_pool_takes_first_maximum() {
        let net = NetworkGraph::new([1, 2, 2], &[LayerSpec::max_pool(2, 2)], LossKind::MeanSquaredError).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 3.0, 0.0]).unwrap();
        assert_eq!(pool_argmax(net.layer(0), 0, x.data()), 1);
        assert_eq!(net.predict(&x).unwrap().data(), &[3.0]);
    }
}
