//! Minibatch SGD with momentum.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diff::{evaluate, ParamSet};
use crate::error::{Error, Result};
use crate::network::NetworkGraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 1500, batch_size: 32, learning_rate: 0.01, momentum: 0.9 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("train.momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v = m v + g; p -= lr v`.
///
/// Masked weights receive neither gradient nor velocity, so they never move.
type Velocity = Option<(Vec<f64>, Option<Vec<f64>>)>;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Velocity>,
}

impl Sgd {
    pub fn new(net: &NetworkGraph, learning_rate: f64, momentum: f64) -> Self {
        let velocity = net
            .layers()
            .iter()
            .map(|l| l.weight.as_ref().map(|w| (vec![0.0; w.len()], l.bias.as_ref().map(|b| vec![0.0; b.len()]))))
            .collect();
        Sgd { learning_rate, momentum, velocity }
    }

    pub fn step(&mut self, net: &mut NetworkGraph, grads: &ParamSet) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::shape(None, "gradient set does not match the network"));
        }
        for (l, (g, v)) in grads.iter().zip(&mut self.velocity).enumerate() {
            let (Some(g), Some((vw, vb))) = (g, v) else { continue };
            let wmask = net.weight_mask(l);
            let bmask = net.bias_mask(l);
            let w = net.weight_mut(l).expect("velocity implies weights");
            update(w.data_mut(), vw, g.weight.data(), wmask.as_deref(), self.learning_rate, self.momentum);
            if let (Some(gb), Some(vb)) = (&g.bias, vb) {
                let b = net.bias_mut(l).expect("bias velocity implies bias");
                update(b.data_mut(), vb, gb.data(), bmask.as_deref(), self.learning_rate, self.momentum);
            }
        }
        Ok(())
    }
}

fn update(p: &mut [f64], v: &mut [f64], g: &[f64], mask: Option<&[bool]>, lr: f64, m: f64) {
    for i in 0..p.len() {
        if mask.is_some_and(|mk| mk[i]) {
            v[i] = 0.0;
            continue;
        }
        v[i] = m * v[i] + g[i];
        p[i] -= lr * v[i];
    }
}

/// Draws minibatches from an index pool, reshuffling each epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(pool: &[usize], batch_size: usize) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Empty("training index pool"));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(BatchSampler { pool: pool.to_vec(), order: Vec::new(), cursor: 0, batch_size: batch_size.min(pool.len()) })
    }

    pub fn next_indices<R: Rng>(&mut self, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// One SGD step on a minibatch; returns the batch loss before the update.
pub fn train_step<R: Rng>(
    net: &mut NetworkGraph,
    opt: &mut Sgd,
    data: &Dataset,
    sampler: &mut BatchSampler,
    rng: &mut R,
) -> Result<f64> {
    let batch = data.batch(&sampler.next_indices(rng))?;
    let rec = evaluate(net, &batch, false, false)?;
    let grads = rec.param_grad.as_ref().ok_or(Error::MissingPass("the backward pass"))?;
    opt.step(net, grads)?;
    Ok(rec.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean minibatch loss over the last 50 steps.
    pub final_loss: f64,
}

/// Trains `net` for `config.steps` minibatch steps drawn from `indices`.
pub fn train<R: Rng>(
    net: &mut NetworkGraph,
    data: &Dataset,
    indices: &[usize],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    config.validate()?;
    let mut opt = Sgd::new(net, config.learning_rate, config.momentum);
    let mut sampler = BatchSampler::new(indices, config.batch_size)?;
    let mut recent = std::collections::VecDeque::with_capacity(50);
    for step in 0..config.steps {
        let loss = train_step(net, &mut opt, data, &mut sampler, rng)
            .map_err(|e| e.context(format!("training step {step}")))?;
        if recent.len() == 50 {
            recent.pop_front();
        }
        recent.push_back(loss);
        if step % 500 == 0 {
            log::debug!("train step {step}: loss {loss:.4}");
        }
    }
    let final_loss = if recent.is_empty() { f64::NAN } else { recent.iter().sum::<f64>() / recent.len() as f64 };
    Ok(TrainReport { steps: config.steps, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, LossKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sampler_covers_pool_each_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = BatchSampler::new(&[3, 5, 7, 9], 2).unwrap();
        let mut seen: Vec<usize> = s.next_indices(&mut rng).into_iter().chain(s.next_indices(&mut rng)).collect();
        seen.sort();
        assert_eq!(seen, vec![3, 5, 7, 9]);
    }

    #[test]
    fn masked_weights_do_not_move() {
        let mut net = NetworkGraph::new(
            [1, 4, 4],
            &[LayerSpec::conv(1, 3, 3, 1, 1), LayerSpec::relu(), LayerSpec::gap(), LayerSpec::dense(3, 2)],
            LossKind::SoftmaxCrossEntropy,
        )
        .unwrap();
        net.init_params(&mut ChaCha8Rng::seed_from_u64(4));
        crate::prune::prune_channel(&mut net, crate::network::ChannelId::new(0, 1)).unwrap();
        let before = net.clone();
        let data = crate::data::synthetic::separable(64, [1, 4, 4], 9);
        let idx: Vec<usize> = (0..64).collect();
        let cfg = TrainConfig { steps: 20, batch_size: 8, learning_rate: 0.1, momentum: 0.9 };
        train(&mut net, &data, &idx, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for l in [0, 3] {
            let mask = net.weight_mask(l).unwrap();
            let (a, b) = (before.layer(l).weight.as_ref().unwrap(), net.layer(l).weight.as_ref().unwrap());
            for (i, _) in mask.iter().enumerate().filter(|m| *m.1) {
                assert_eq!(a.data()[i].to_bits(), b.data()[i].to_bits());
            }
        }
        assert_ne!(before.layer(3).weight, net.layer(3).weight);
    }
}
