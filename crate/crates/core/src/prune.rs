//! Channel masking and the iterative global pruning loops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{accuracy, ChannelId, LayerKind, NetworkGraph};
use crate::saliency::{evaluate_signal, ActivationTap, SaliencyMap, SignalSpec};
use crate::train::{train_step, BatchSampler, Sgd};

/// Masks output channel `id`: its filter and bias, and the matching input
/// slice of every consumer, are zeroed. Returns how many weights and biases
/// became newly masked.
pub fn prune_channel(net: &mut NetworkGraph, id: ChannelId) -> Result<usize> {
    let Some(layer) = net.layers().get(id.layer) else {
        return Err(Error::NoSuchChannel { layer: id.layer, channel: id.channel });
    };
    if layer.spec.kind != LayerKind::Conv {
        return Err(Error::UnsupportedLayer { layer: id.layer, kind: layer.spec.kind.name(), op: "channel pruning" });
    }
    if id.channel >= layer.spec.out_channels {
        return Err(Error::NoSuchChannel { layer: id.layer, channel: id.channel });
    }
    if net.mask().is_pruned(id.layer, id.channel) {
        return Err(Error::AlreadyPruned { layer: id.layer, channel: id.channel });
    }
    let before = masked_param_count(net);
    net.mark_pruned(id.layer, id.channel);
    net.zero_masked();
    Ok(masked_param_count(net) - before)
}

fn count_true(m: Option<Vec<bool>>) -> usize {
    m.map_or(0, |m| m.iter().filter(|&&b| b).count())
}

/// Masked weights plus masked biases over all layers.
pub fn masked_param_count(net: &NetworkGraph) -> usize {
    (0..net.layers().len()).map(|l| count_true(net.weight_mask(l)) + count_true(net.bias_mask(l))).sum()
}

/// Masked conv weights over all conv weights. Biases and dense layers are
/// not counted.
pub fn sparsity(net: &NetworkGraph) -> f64 {
    let (mut masked, mut total) = (0usize, 0usize);
    for l in net.conv_layers() {
        total += net.layer(l).weight.as_ref().map_or(0, |w| w.len());
        masked += count_true(net.weight_mask(l));
    }
    if total == 0 {
        0.0
    } else {
        masked as f64 / total as f64
    }
}

/// The globally least salient unpruned channel, skipping any layer that is
/// down to its last live channel. Ties go to the lowest `(layer, channel)`.
pub fn select_least_salient(map: &SaliencyMap, net: &NetworkGraph) -> Option<ChannelSaliencyChoice> {
    let mut best: Option<ChannelSaliencyChoice> = None;
    for c in &map.channels {
        let layer = net.layer(c.id.layer);
        let live = layer.spec.out_channels - net.mask().pruned_in_layer(c.id.layer);
        if live <= 1 || net.mask().is_pruned(c.id.layer, c.id.channel) {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => c.saliency < b.saliency || (c.saliency == b.saliency && c.id < b.id),
        };
        if better {
            best = Some(ChannelSaliencyChoice { id: c.id, saliency: c.saliency });
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSaliencyChoice {
    pub id: ChannelId,
    pub saliency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    /// Retrain until train accuracy reaches this; `None` means the
    /// pre-pruning train accuracy minus 0.005.
    pub train_acc_recovery_target: Option<f64>,
    pub max_retrain_steps_per_iteration: usize,
    pub retrain_batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Stop once baseline test accuracy minus current exceeds this.
    pub stop_test_acc_drop: f64,
    pub eval_batches_for_saliency: usize,
    pub eval_batch_size: usize,
    /// Retraining-split samples used to measure train accuracy.
    pub train_acc_samples: usize,
    pub seed: u64,
    #[serde(skip)]
    pub tap: ActivationTap,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            train_acc_recovery_target: None,
            max_retrain_steps_per_iteration: 50,
            retrain_batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            stop_test_acc_drop: 0.05,
            eval_batches_for_saliency: 8,
            eval_batch_size: 64,
            train_acc_samples: 512,
            seed: 0,
            tap: ActivationTap::PostNonlinearity,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if let Some(t) = self.train_acc_recovery_target {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("train_acc_recovery_target {t} not in (0, 1]")));
            }
        }
        if !frac(self.stop_test_acc_drop) {
            return Err(Error::Config(format!("stop_test_acc_drop {} not in [0, 1]", self.stop_test_acc_drop)));
        }
        if self.retrain_batch_size == 0
            || self.eval_batches_for_saliency == 0
            || self.eval_batch_size == 0
            || self.train_acc_samples == 0
        {
            return Err(Error::Config("harness batch counts and sizes must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("harness learning_rate must be positive and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Data a pruning run reads. `retrain` and `eval` index disjoint parts of
/// `train`.
#[derive(Debug, Clone, Copy)]
pub struct PruneData<'a> {
    pub train: &'a Dataset,
    pub retrain: &'a [usize],
    pub eval: &'a [usize],
    pub test: &'a Dataset,
}

/// One pruning iteration (step 0 is the unpruned baseline).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub step: usize,
    pub pruned: Option<ChannelId>,
    pub saliency: Option<f64>,
    pub sparsity: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub retrain_steps: usize,
    pub cumulative_retrain_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The last recorded step dropped test accuracy past the limit.
    TestAccDrop,
    /// Every layer is down to one live channel.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneRun {
    pub records: Vec<ExperimentRecord>,
    pub stop: StopReason,
    /// Steps whose saliency needed the zero-denominator fallback.
    pub fallback_steps: Vec<usize>,
}

impl PruneRun {
    pub fn baseline(&self) -> &ExperimentRecord {
        &self.records[0]
    }
}

/// Iterative pruning without retraining.
pub fn run_prune_no_retrain(
    net: &mut NetworkGraph,
    spec: &SignalSpec,
    data: PruneData<'_>,
    config: &HarnessConfig,
) -> Result<PruneRun> {
    run(net, spec, data, config, false)
}

/// Iterative pruning with up to `max_retrain_steps_per_iteration` SGD steps
/// after each prune while train accuracy is below the recovery target.
pub fn run_prune_with_retrain(
    net: &mut NetworkGraph,
    spec: &SignalSpec,
    data: PruneData<'_>,
    config: &HarnessConfig,
) -> Result<PruneRun> {
    run(net, spec, data, config, true)
}

/// Checks that `data` fits the network's input and output shapes.
pub fn check_compatible(net: &NetworkGraph, data: &Dataset, what: &str) -> Result<()> {
    if data.shape() != net.input_shape() {
        return Err(Error::Config(format!(
            "{what} images are {:?}, the network expects {:?}",
            data.shape(),
            net.input_shape()
        )));
    }
    let outputs = net.output_shape()[0];
    if data.num_classes() > outputs {
        return Err(Error::Config(format!(
            "{what} has {} classes, the network has {outputs} outputs",
            data.num_classes()
        )));
    }
    Ok(())
}

fn run(
    net: &mut NetworkGraph,
    spec: &SignalSpec,
    data: PruneData<'_>,
    config: &HarnessConfig,
    retrain: bool,
) -> Result<PruneRun> {
    config.validate()?;
    check_compatible(net, data.train, "train set")?;
    check_compatible(net, data.test, "test set")?;
    let eval_n = (config.eval_batches_for_saliency * config.eval_batch_size).min(data.eval.len());
    if eval_n == 0 {
        return Err(Error::Empty("saliency evaluation split"));
    }
    let eval_batches = data.train.batches(&data.eval[..eval_n], config.eval_batch_size)?;
    let acc_n = config.train_acc_samples.min(data.retrain.len());
    if acc_n == 0 {
        return Err(Error::Empty("retraining split"));
    }
    let train_acc_batches = data.train.batches(&data.retrain[..acc_n], 256)?;
    let test_batches = data.test.all_batches(256)?;
    let train_acc = |net: &NetworkGraph| accuracy(net, &train_acc_batches);

    let base_train = train_acc(net)?;
    let base_test = accuracy(net, &test_batches)?;
    let target = config.train_acc_recovery_target.unwrap_or(base_train - 0.005);
    let mut records = vec![ExperimentRecord {
        step: 0,
        pruned: None,
        saliency: None,
        sparsity: sparsity(net),
        train_acc: base_train,
        test_acc: base_test,
        retrain_steps: 0,
        cumulative_retrain_steps: 0,
    }];
    let mut fallback_steps = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Sgd::new(net, config.learning_rate, config.momentum);
    let mut sampler = if retrain { Some(BatchSampler::new(data.retrain, config.retrain_batch_size)?) } else { None };
    let mut cumulative = 0;

    for step in 1.. {
        let ctx = |e: Error| e.context(format!("{spec} step {step}"));
        let map = evaluate_signal(net, spec, &eval_batches, config.tap).map_err(ctx)?;
        if map.has_fallback() {
            fallback_steps.push(step);
        }
        let Some(choice) = select_least_salient(&map, net) else {
            return Ok(PruneRun { records, stop: StopReason::Exhausted, fallback_steps });
        };
        prune_channel(net, choice.id).map_err(ctx)?;
        let mut acc = train_acc(net).map_err(ctx)?;
        let mut steps = 0;
        if let Some(sampler) = sampler.as_mut() {
            while acc < target && steps < config.max_retrain_steps_per_iteration {
                train_step(net, &mut opt, data.train, sampler, &mut rng).map_err(ctx)?;
                steps += 1;
                acc = train_acc(net).map_err(ctx)?;
            }
        }
        cumulative += steps;
        let test_acc = accuracy(net, &test_batches).map_err(ctx)?;
        log::debug!("{spec} step {step}: pruned {} test acc {test_acc:.4}", choice.id);
        records.push(ExperimentRecord {
            step,
            pruned: Some(choice.id),
            saliency: Some(choice.saliency),
            sparsity: sparsity(net),
            train_acc: acc,
            test_acc,
            retrain_steps: steps,
            cumulative_retrain_steps: cumulative,
        });
        if base_test - test_acc > config.stop_test_acc_drop {
            return Ok(PruneRun { records, stop: StopReason::TestAccDrop, fallback_steps });
        }
    }
    unreachable!("the loop only exits by returning")
}
