use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use prunetax_core::data::{synthetic, Dataset, SplitConfig};
use prunetax_core::diff::evaluate;
use prunetax_core::network::{ChannelId, LayerSpec, LossKind, NetworkGraph};
use prunetax_core::prune::{
    prune_channel, run_prune_no_retrain, run_prune_with_retrain, sparsity, HarnessConfig, PruneData, StopReason,
};
use prunetax_core::saliency::SignalSpec;
use prunetax_core::train::{train, TrainConfig};

fn spec(s: &str) -> SignalSpec {
    s.parse().unwrap()
}

fn set(net: &mut NetworkGraph, l: usize, w: &[f64]) {
    net.weight_mut(l).unwrap().data_mut().copy_from_slice(w);
}

/// Two 2-feature classes, plus an unused third class.
fn two_feature_data(n: usize) -> Dataset {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = i % 2;
        let strength = 0.8 + 0.4 * ((i / 2) % 5) as f32 / 4.0;
        images.extend(if y == 0 { [strength, 0.0] } else { [0.0, strength] });
        labels.push(y as u8);
    }
    Dataset::new([2, 1, 1], 3, images, labels).unwrap()
}

/// Each conv channel carries the evidence for one class; removing either
/// flips that class to the constant third logit.
fn fragile_net() -> NetworkGraph {
    let mut net = NetworkGraph::new(
        [2, 1, 1],
        &[LayerSpec::conv(2, 2, 1, 1, 0), LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::dense(2, 3)],
        LossKind::SoftmaxCrossEntropy,
    )
    .unwrap();
    set(&mut net, 0, &[1.0, 0.0, 0.0, 1.0]);
    set(&mut net, 3, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    net.bias_mut(3).unwrap().data_mut().copy_from_slice(&[-0.5, -0.5, 0.0]);
    net
}

fn all_indices(d: &Dataset) -> Vec<usize> {
    (0..d.len()).collect()
}

#[test]
fn zero_drop_budget_stops_after_the_first_harmful_step() {
    let data = two_feature_data(40);
    let idx = all_indices(&data);
    let pd = PruneData { train: &data, retrain: &idx, eval: &idx, test: &data };
    let cfg = HarnessConfig { stop_test_acc_drop: 0.0, ..HarnessConfig::default() };
    for s in ["weights.value.l1.none", "activations.value.l2.none"] {
        let mut net = fragile_net();
        let run = run_prune_no_retrain(&mut net, &spec(s), pd, &cfg).unwrap();
        assert_eq!(run.records.len(), 2, "{s}");
        assert_eq!(run.stop, StopReason::TestAccDrop);
        assert_eq!(run.records[0].test_acc, 1.0);
        assert!(run.records[1].test_acc < 1.0);
    }
}

#[test]
fn l1_order_follows_hand_ranking() {
    // conv0 filter L1 norms [0.3, 0.1, 0.5, 0.2]; conv1 rows [1; 2; 0.01] x 4.
    let mut net = NetworkGraph::new(
        [1, 2, 2],
        &[
            LayerSpec::conv(1, 4, 1, 1, 0),
            LayerSpec::relu(),
            LayerSpec::conv(4, 3, 1, 1, 0),
            LayerSpec::gap(),
            LayerSpec::dense(3, 2),
        ],
        LossKind::SoftmaxCrossEntropy,
    )
    .unwrap();
    set(&mut net, 0, &[0.3, -0.1, 0.5, -0.2]);
    let mut w1 = vec![1.0; 4];
    w1.extend([2.0; 4]);
    w1.extend([-0.01; 4]);
    set(&mut net, 2, &w1);
    let data = synthetic::separable(16, [1, 2, 2], 1);
    let idx = all_indices(&data);
    let pd = PruneData { train: &data, retrain: &idx, eval: &idx, test: &data };
    let cfg = HarnessConfig { stop_test_acc_drop: 1.0, ..HarnessConfig::default() };
    let run = run_prune_no_retrain(&mut net, &spec("weights.value.l1.none"), pd, &cfg).unwrap();
    let order: Vec<ChannelId> = run.records.iter().filter_map(|r| r.pruned).collect();
    // After (0,1), (0,3), (0,0) go, conv1 rows keep one live input: L1 1 and 2.
    let expected = [(2, 2), (0, 1), (0, 3), (0, 0), (2, 0)].map(|(l, c)| ChannelId::new(l, c));
    assert_eq!(order, expected);
    assert_eq!(run.stop, StopReason::Exhausted);
    let sp: Vec<f64> = run.records.iter().map(|r| r.sparsity).collect();
    assert!(sp.windows(2).all(|w| w[1] > w[0]));
}

fn trained_lenet_like(seed: u64) -> (NetworkGraph, Dataset, Dataset) {
    let train_set = synthetic::patterns(600, [1, 8, 8], 4, 0.6, 7, seed);
    let test_set = synthetic::patterns(200, [1, 8, 8], 4, 0.6, 7, seed + 100);
    let mut net = NetworkGraph::new(
        [1, 8, 8],
        &[
            LayerSpec::conv(1, 6, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::conv(6, 6, 3, 1, 0),
            LayerSpec::relu(),
            LayerSpec::gap(),
            LayerSpec::dense(6, 4),
        ],
        LossKind::SoftmaxCrossEntropy,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.init_params(&mut rng);
    let idx = all_indices(&train_set);
    let cfg = TrainConfig { steps: 300, batch_size: 16, learning_rate: 0.02, momentum: 0.9 };
    train(&mut net, &train_set, &idx, &cfg, &mut rng).unwrap();
    (net, train_set, test_set)
}

#[test]
fn zero_retrain_budget_matches_no_retrain() {
    let (net, train_set, test_set) = trained_lenet_like(2);
    let split = SplitConfig { retrain: 0.7, eval: 0.3 }.split(train_set.len(), 2).unwrap();
    let pd = PruneData { train: &train_set, retrain: &split.retrain, eval: &split.eval, test: &test_set };
    let cfg =
        HarnessConfig { max_retrain_steps_per_iteration: 0, eval_batches_for_saliency: 2, ..HarnessConfig::default() };
    for s in ["activations.taylor1.abs_of_sum.cardinality", "weights.value.l2.none"] {
        let a = run_prune_no_retrain(&mut net.clone(), &spec(s), pd, &cfg).unwrap();
        let b = run_prune_with_retrain(&mut net.clone(), &spec(s), pd, &cfg).unwrap();
        assert_eq!(a, b, "{s}");
    }
}

#[test]
fn retraining_respects_budget_and_mask() {
    let (net, train_set, test_set) = trained_lenet_like(3);
    let split = SplitConfig { retrain: 0.7, eval: 0.3 }.split(train_set.len(), 3).unwrap();
    let pd = PruneData { train: &train_set, retrain: &split.retrain, eval: &split.eval, test: &test_set };
    let cfg = HarnessConfig {
        max_retrain_steps_per_iteration: 7,
        train_acc_recovery_target: Some(1.0),
        stop_test_acc_drop: 1.0,
        eval_batches_for_saliency: 2,
        ..HarnessConfig::default()
    };
    let mut pruned = net.clone();
    let run = run_prune_with_retrain(&mut pruned, &spec("activations.value.l2.none"), pd, &cfg).unwrap();
    assert!(run.records.iter().all(|r| r.retrain_steps <= 7));
    assert!(run.records.iter().skip(1).any(|r| r.retrain_steps == 7));
    let total: usize = run.records.iter().map(|r| r.retrain_steps).sum();
    assert_eq!(run.records.last().unwrap().cumulative_retrain_steps, total);
    for l in [0, 3, 6] {
        let mask = pruned.weight_mask(l).unwrap();
        let w = pruned.layer(l).weight.as_ref().unwrap();
        assert!(mask.iter().zip(w.data()).all(|(&m, &v)| !m || v == 0.0));
    }
    assert!((sparsity(&pruned) - run.records.last().unwrap().sparsity).abs() < 1e-15);
}

#[test]
fn sparsity_steps_equal_removed_conv_weights() {
    let (mut net, _, _) = trained_lenet_like(4);
    let total = (6 * 9 + 6 * 6 * 9) as f64;
    let mut prev = sparsity(&net);
    for id in [ChannelId::new(0, 2), ChannelId::new(3, 1), ChannelId::new(0, 5)] {
        let live_inputs = 6 - net.mask().pruned_in_layer(0);
        let before_consumers = if id.layer == 0 { 6 - net.mask().pruned_in_layer(3) } else { 0 };
        prune_channel(&mut net, id).unwrap();
        let expected = if id.layer == 0 { 9 + before_consumers * 9 } else { live_inputs * 9 };
        let now = sparsity(&net);
        assert!((now - prev - expected as f64 / total).abs() < 1e-12, "{id}");
        prev = now;
    }
}

#[test]
fn second_order_taylor_is_exact_for_a_linear_layer() {
    // Dense 4 -> 1 with MSE is quadratic in each weight.
    let mut net = NetworkGraph::new([4, 1, 1], &[LayerSpec::dense(4, 1)], LossKind::MeanSquaredError).unwrap();
    net.init_params(&mut ChaCha8Rng::seed_from_u64(11));
    let x = prunetax_core::Tensor::from_fn(&[5, 4, 1, 1], |i| ((i * 31 % 17) as f64 - 8.0) / 5.0);
    let t = prunetax_core::Tensor::from_fn(&[5, 1, 1, 1], |i| i as f64 * 0.3 - 0.5);
    let batch = prunetax_core::network::Batch::new(x, prunetax_core::network::Targets::Values(t)).unwrap();
    let rec = evaluate(&net, &batch, true, false).unwrap();
    let g = &rec.param_grad.as_ref().unwrap()[0].as_ref().unwrap().weight;
    let h = &rec.param_hess_app1.as_ref().unwrap()[0].as_ref().unwrap().weight;
    for i in 0..4 {
        let w = net.layer(0).weight.as_ref().unwrap().data()[i];
        let predicted = -w * g.data()[i] + 0.5 * w * w * h.data()[i];
        let mut zeroed = net.clone();
        zeroed.weight_mut(0).unwrap().data_mut()[i] = 0.0;
        let actual = zeroed.forward(&batch).unwrap().loss - rec.loss;
        assert!((predicted - actual).abs() <= 1e-9 * actual.abs().max(1e-12), "{i}: {predicted} vs {actual}");
    }
}
