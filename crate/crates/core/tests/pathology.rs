//! Summing signed first-order terms lets positive and negative contributions
//! cancel; squaring them first ranks channels closer to their true effect.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use prunetax_core::data::synthetic;
use prunetax_core::experiment::analysis::spearman;
use prunetax_core::network::{LayerSpec, LossKind, NetworkGraph};
use prunetax_core::prune::prune_channel;
use prunetax_core::saliency::{evaluate_signal, ActivationTap, SignalSpec};
use prunetax_core::train::{train, TrainConfig};

fn rank_agreement(seed: u64) -> (f64, f64) {
    let shape = [1, 8, 8];
    let data = synthetic::patterns(800, shape, 4, 0.8, 21, seed);
    let mut net = NetworkGraph::new(
        shape,
        &[
            LayerSpec::conv(1, 8, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::conv(8, 8, 3, 1, 0),
            LayerSpec::relu(),
            LayerSpec::gap(),
            LayerSpec::dense(8, 4),
        ],
        LossKind::SoftmaxCrossEntropy,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.init_params(&mut rng);
    let train_idx: Vec<usize> = (0..600).collect();
    let cfg = TrainConfig { steps: 400, batch_size: 16, learning_rate: 0.02, momentum: 0.9 };
    train(&mut net, &data, &train_idx, &cfg, &mut rng).unwrap();

    let eval_idx: Vec<usize> = (600..800).collect();
    let batches = data.batches(&eval_idx, 50).unwrap();
    let loss =
        |n: &NetworkGraph| batches.iter().map(|b| n.forward(b).unwrap().loss).sum::<f64>() / batches.len() as f64;
    let base = loss(&net);

    let score = |id: &str| {
        let spec: SignalSpec = id.parse().unwrap();
        evaluate_signal(&net, &spec, &batches, ActivationTap::default()).unwrap()
    };
    let sum = score("activations.taylor1.sum.none");
    let sos = score("activations.taylor1.sum_of_squares.none");
    let truth: Vec<f64> = sum
        .channels
        .iter()
        .map(|c| {
            let mut p = net.clone();
            prune_channel(&mut p, c.id).unwrap();
            loss(&p) - base
        })
        .collect();
    let s = |m: &prunetax_core::saliency::SaliencyMap| m.channels.iter().map(|c| c.saliency).collect::<Vec<_>>();
    (spearman(&s(&sum), &truth).unwrap_or(0.0), spearman(&s(&sos), &truth).unwrap_or(0.0))
}

#[test]
fn squared_reduction_tracks_true_loss_change_better_than_sum() {
    let results: Vec<(f64, f64)> = (1..=3).map(rank_agreement).collect();
    eprintln!("spearman (sum, sum_of_squares) per seed: {results:?}");
    let wins = results.iter().filter(|(sum, sos)| sum < sos).count();
    assert!(wins >= 2, "spearman (sum, sum_of_squares) per seed: {results:?}");
}
