//! Reverse-mode first derivatives and two diagonal second-derivative
//! estimates for every activation and parameter of a [`NetworkGraph`].
//!
//! All derivatives are of the batch-mean loss. Derivatives with respect to
//! masked weights are reported as zero, so an optimiser never moves them.
//!
//! Second derivatives ("app1") are back-propagated keeping only the diagonal
//! of each layer's Hessian and without any Levenberg-Marquardt truncation.
//! The squared-gradient estimate ("app2") is the Gauss-Newton diagonal in its
//! empirical form: the elementwise square of the gradient of the loss on the
//! data at hand (batch-empirical, not an expectation over the model's
//! predictive distribution).

use crate::error::{Error, Result};
use crate::network::{pool_argmax, softmax, LayerKind, LossKind, NetworkGraph, Targets};
use crate::tensor::{conv_input_adjoint, conv_weight_adjoint, ConvGeometry, Tensor};

/// Derivative (or value) tensors of one parameter layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensors {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Per-layer parameter tensors; `None` for parameterless layers.
pub type ParamSet = Vec<Option<ParamTensors>>;

/// Everything one evaluation of a batch produces.
///
/// Index `l` of each per-layer vector refers to the *output* of layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub input: Tensor,
    pub targets: Targets,
    pub activations: Vec<Tensor>,
    pub loss: f64,
    pub act_grad: Option<Vec<Tensor>>,
    pub act_hess_app1: Option<Vec<Tensor>>,
    pub act_hess_app2: Option<Vec<Tensor>>,
    pub param_grad: Option<ParamSet>,
    pub param_hess_app1: Option<ParamSet>,
    pub param_hess_app2: Option<ParamSet>,
}

impl ActivationRecord {
    pub(crate) fn from_forward(input: Tensor, targets: Targets, activations: Vec<Tensor>, loss: f64) -> Self {
        ActivationRecord {
            input,
            targets,
            activations,
            loss,
            act_grad: None,
            act_hess_app1: None,
            act_hess_app2: None,
            param_grad: None,
            param_hess_app1: None,
            param_hess_app2: None,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.input.shape()[0]
    }

    fn layer_input(&self, l: usize) -> &Tensor {
        if l == 0 {
            &self.input
        } else {
            &self.activations[l - 1]
        }
    }

    fn check_forward(&self, net: &NetworkGraph) -> Result<()> {
        if self.activations.len() != net.layers().len() {
            return Err(Error::MissingPass("the forward pass"));
        }
        Ok(())
    }
}

/// Which quantity a backward sweep carries.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Order {
    First,
    SecondDiagonal,
}

/// Fills `act_grad` and `param_grad`.
pub fn backward(net: &NetworkGraph, record: &mut ActivationRecord) -> Result<()> {
    record.check_forward(net)?;
    let seed = loss_seed(net, record, Order::First)?;
    let (acts, params) = sweep(net, record, seed, Order::First)?;
    record.act_grad = Some(acts);
    record.param_grad = Some(params);
    Ok(())
}

/// Fills `act_hess_app1` and `param_hess_app1` by layer-diagonal
/// second-derivative back-propagation.
///
/// Per layer, with output `y`, input `x`, `H(.)` the diagonal second
/// derivative of the loss and `G(.)` the gradient:
///
/// * linear (conv/dense), `y = W x + b`:
///   `H(x_j) = sum_i W_ij^2 H(y_i)`, `H(W_ij) = sum x_j^2 H(y_i)`, `H(b_i) = sum H(y_i)`
///   (sums over every output position and sample sharing the weight);
/// * pointwise `y = f(x)`: `H(x) = f'(x)^2 H(y) + f''(x) G(y)`; for ReLU
///   `f'' = 0` so only the first term remains;
/// * max pool: `H` routes to the selected element (derivative 0 or 1);
/// * global average pool over `hw` positions: `H(x) = H(y) / (hw)^2`;
/// * flatten: reshape.
///
/// The loss seeds the recursion with its own Hessian diagonal: `p_k(1 - p_k)/n`
/// for softmax cross-entropy, `1/n` for squared error. Entries can in general
/// be negative through the `f''` term; they are kept as-is.
pub fn hessian_diag_app1(net: &NetworkGraph, record: &mut ActivationRecord) -> Result<()> {
    record.check_forward(net)?;
    if record.act_grad.is_none() {
        return Err(Error::MissingPass("gradients (run backward first)"));
    }
    let seed = loss_seed(net, record, Order::SecondDiagonal)?;
    let (acts, params) = sweep(net, record, seed, Order::SecondDiagonal)?;
    record.act_hess_app1 = Some(acts);
    record.param_hess_app1 = Some(params);
    Ok(())
}

/// Fills `act_hess_app2` and `param_hess_app2` with squared gradients.
pub fn hessian_diag_app2(record: &mut ActivationRecord) -> Result<()> {
    let acts = record.act_grad.as_ref().ok_or(Error::MissingPass("gradients (run backward first)"))?;
    let params = record.param_grad.as_ref().ok_or(Error::MissingPass("gradients (run backward first)"))?;
    let sq = |t: &Tensor| t.map(|v| v * v);
    record.act_hess_app2 = Some(acts.iter().map(sq).collect());
    record.param_hess_app2 = Some(
        params
            .iter()
            .map(|p| p.as_ref().map(|p| ParamTensors { weight: sq(&p.weight), bias: p.bias.as_ref().map(sq) }))
            .collect(),
    );
    Ok(())
}

/// Convenience: forward, backward and whichever Hessian estimates are asked
/// for, in one call.
pub fn evaluate(net: &NetworkGraph, batch: &crate::network::Batch, app1: bool, app2: bool) -> Result<ActivationRecord> {
    let mut rec = net.forward(batch)?;
    backward(net, &mut rec)?;
    if app1 {
        hessian_diag_app1(net, &mut rec)?;
    }
    if app2 {
        hessian_diag_app2(&mut rec)?;
    }
    Ok(rec)
}

fn loss_seed(net: &NetworkGraph, record: &ActivationRecord, order: Order) -> Result<Tensor> {
    let out = record.activations.last().expect("checked non-empty");
    let n = out.shape()[0] as f64;
    match (net.loss_kind(), &record.targets) {
        (LossKind::SoftmaxCrossEntropy, Targets::Labels(labels)) => {
            let k = out.shape()[1];
            let mut seed = Tensor::zeros(out.shape());
            for (b, &y) in labels.iter().enumerate() {
                let p = softmax(&out.data()[b * k..(b + 1) * k]);
                let row = &mut seed.data_mut()[b * k..(b + 1) * k];
                for (j, (s, &pj)) in row.iter_mut().zip(&p).enumerate() {
                    *s = match order {
                        Order::First => (pj - if j == y { 1.0 } else { 0.0 }) / n,
                        Order::SecondDiagonal => pj * (1.0 - pj) / n,
                    };
                }
            }
            Ok(seed)
        }
        (LossKind::MeanSquaredError, Targets::Values(t)) => Ok(match order {
            Order::First => out.zip_map(t, |y, t| (y - t) / n)?,
            Order::SecondDiagonal => out.map(|_| 1.0 / n),
        }),
        _ => Err(Error::shape(None, "targets do not match the loss kind")),
    }
}

fn sweep(net: &NetworkGraph, record: &ActivationRecord, seed: Tensor, order: Order) -> Result<(Vec<Tensor>, ParamSet)> {
    let layers = net.layers();
    let mut acts: Vec<Option<Tensor>> = vec![None; layers.len()];
    let mut params: ParamSet = vec![None; layers.len()];
    let mut up = seed;
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let x = record.layer_input(l);
        let need_input = l > 0;
        let down = match layer.spec.kind {
            LayerKind::Conv | LayerKind::Dense => {
                let (weight, _) = net.effective_params(l);
                let weight = weight.expect("parameter layer has weights");
                let geo = ConvGeometry::new(x.shape(), weight.shape(), layer.spec.stride, layer.spec.pad, Some(l))?;
                let (gw, gb) = match order {
                    Order::First => conv_weight_adjoint(&geo, up.data(), x.data()),
                    Order::SecondDiagonal => {
                        let x2: Vec<f64> = x.data().iter().map(|v| v * v).collect();
                        conv_weight_adjoint(&geo, up.data(), &x2)
                    }
                };
                let mut gw = Tensor::new(weight.shape().to_vec(), gw)?;
                let mut gb = layer.spec.has_bias.then(|| Tensor::new(vec![gb.len()], gb)).transpose()?;
                if let Some(m) = net.weight_mask(l) {
                    zero_masked(&mut gw, &m);
                }
                if let (Some(b), Some(m)) = (&mut gb, net.bias_mask(l)) {
                    zero_masked(b, &m);
                }
                params[l] = Some(ParamTensors { weight: gw, bias: gb });
                need_input.then(|| match order {
                    Order::First => conv_input_adjoint(&geo, up.data(), weight.data()),
                    Order::SecondDiagonal => {
                        let w2: Vec<f64> = weight.data().iter().map(|v| v * v).collect();
                        conv_input_adjoint(&geo, up.data(), &w2)
                    }
                })
            }
            LayerKind::Relu => {
                // relu' is 0/1 (squared: unchanged) and relu'' = 0 off the kink,
                // so both orders reduce to gating by the input sign.
                Some(x.zip_map(&up, |xv, u| if xv > 0.0 { u } else { 0.0 })?)
            }
            LayerKind::MaxPool => {
                let mut d = Tensor::zeros(x.shape());
                let src = x.data();
                for (o, &u) in up.data().iter().enumerate() {
                    d.data_mut()[pool_argmax(layer, o, src)] += u;
                }
                Some(d)
            }
            LayerKind::Gap => {
                let [_, _, h, w] = x.dims4(Some(l))?;
                let hw = (h * w) as f64;
                let factor = match order {
                    Order::First => 1.0 / hw,
                    Order::SecondDiagonal => 1.0 / (hw * hw),
                };
                let hwn = h * w;
                Some(Tensor::from_fn(x.shape(), |i| up.data()[i / hwn] * factor))
            }
            LayerKind::Flatten => Some(up.clone().reshape(x.shape())?),
        };
        acts[l] = Some(up);
        match down {
            Some(d) => up = d,
            None => break,
        }
    }
    let acts = acts.into_iter().map(|a| a.expect("every layer visited")).collect();
    Ok((acts, params))
}

fn zero_masked(t: &mut Tensor, mask: &[bool]) {
    for (v, &m) in t.data_mut().iter_mut().zip(mask) {
        if m {
            *v = 0.0;
        }
    }
}

/// Running elementwise mean of activation records across batches.
///
/// Every tensor present in the first record is summed; targets are taken
/// from the first record. The per-sample layout of activation tensors is
/// preserved, so the mean of activations pairs samples by batch position.
#[derive(Debug, Clone, Default)]
pub struct BatchAccumulator {
    sum: Option<ActivationRecord>,
    count: usize,
}

impl BatchAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn accumulate(&mut self, record: &ActivationRecord) -> Result<()> {
        match &mut self.sum {
            None => self.sum = Some(record.clone()),
            Some(sum) => {
                let drift = |what: &str| Error::shape(None, format!("record drift between batches in {what}"));
                sum.input.add_assign(&record.input).map_err(|_| drift("input"))?;
                add_vec(&mut sum.activations, &record.activations).map_err(|_| drift("activations"))?;
                sum.loss += record.loss;
                add_opt_vec(&mut sum.act_grad, &record.act_grad).map_err(|_| drift("activation gradients"))?;
                add_opt_vec(&mut sum.act_hess_app1, &record.act_hess_app1).map_err(|_| drift("app1 activations"))?;
                add_opt_vec(&mut sum.act_hess_app2, &record.act_hess_app2).map_err(|_| drift("app2 activations"))?;
                add_opt_params(&mut sum.param_grad, &record.param_grad).map_err(|_| drift("parameter gradients"))?;
                add_opt_params(&mut sum.param_hess_app1, &record.param_hess_app1)
                    .map_err(|_| drift("app1 parameters"))?;
                add_opt_params(&mut sum.param_hess_app2, &record.param_hess_app2)
                    .map_err(|_| drift("app2 parameters"))?;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn read_average(&self) -> Result<ActivationRecord> {
        let sum = self.sum.as_ref().ok_or(Error::Empty("no batches accumulated"))?;
        if self.count == 1 {
            return Ok(sum.clone());
        }
        let k = 1.0 / self.count as f64;
        let s = |t: &Tensor| t.scale(k);
        let sv = |v: &Option<Vec<Tensor>>| v.as_ref().map(|v| v.iter().map(s).collect());
        let sp = |v: &Option<ParamSet>| {
            v.as_ref().map(|v| {
                v.iter()
                    .map(|p| p.as_ref().map(|p| ParamTensors { weight: s(&p.weight), bias: p.bias.as_ref().map(s) }))
                    .collect()
            })
        };
        Ok(ActivationRecord {
            input: s(&sum.input),
            targets: sum.targets.clone(),
            activations: sum.activations.iter().map(s).collect(),
            loss: sum.loss * k,
            act_grad: sv(&sum.act_grad),
            act_hess_app1: sv(&sum.act_hess_app1),
            act_hess_app2: sv(&sum.act_hess_app2),
            param_grad: sp(&sum.param_grad),
            param_hess_app1: sp(&sum.param_hess_app1),
            param_hess_app2: sp(&sum.param_hess_app2),
        })
    }
}

fn add_vec(a: &mut [Tensor], b: &[Tensor]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(None, "layer count"));
    }
    a.iter_mut().zip(b).try_for_each(|(x, y)| x.add_assign(y))
}

fn add_opt_vec(a: &mut Option<Vec<Tensor>>, b: &Option<Vec<Tensor>>) -> Result<()> {
    match (a, b) {
        (None, None) => Ok(()),
        (Some(a), Some(b)) => add_vec(a, b),
        _ => Err(Error::shape(None, "presence")),
    }
}

fn add_opt_params(a: &mut Option<ParamSet>, b: &Option<ParamSet>) -> Result<()> {
    match (a, b) {
        (None, None) => Ok(()),
        (Some(a), Some(b)) => {
            if a.len() != b.len() {
                return Err(Error::shape(None, "layer count"));
            }
            for (x, y) in a.iter_mut().zip(b) {
                match (x, y) {
                    (None, None) => {}
                    (Some(x), Some(y)) => {
                        x.weight.add_assign(&y.weight)?;
                        match (&mut x.bias, &y.bias) {
                            (None, None) => {}
                            (Some(xb), Some(yb)) => xb.add_assign(yb)?,
                            _ => return Err(Error::shape(None, "bias presence")),
                        }
                    }
                    _ => return Err(Error::shape(None, "parameter presence")),
                }
            }
            Ok(())
        }
        _ => Err(Error::shape(None, "presence")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Batch, LayerSpec};

    fn scalar_net(w: f64) -> NetworkGraph {
        let mut net =
            NetworkGraph::new([1, 1, 1], &[LayerSpec::dense(1, 1).without_bias()], LossKind::MeanSquaredError).unwrap();
        net.weight_mut(0).unwrap().data_mut()[0] = w;
        net
    }

    #[test]
    fn single_weight_gradient_is_analytic() {
        // L = (w x - t)^2 / 2 with x = 1, t = 0, w = 3.
        let net = scalar_net(3.0);
        let batch = Batch::new(
            Tensor::scalar(1.0).reshape(&[1, 1, 1, 1]).unwrap(),
            Targets::Values(Tensor::zeros(&[1, 1, 1, 1])),
        )
        .unwrap();
        let rec = evaluate(&net, &batch, true, true).unwrap();
        assert_eq!(rec.loss, 4.5);
        let g = rec.param_grad.as_ref().unwrap()[0].as_ref().unwrap();
        assert_eq!(g.weight.data(), &[3.0]);
        let h = rec.param_hess_app1.as_ref().unwrap()[0].as_ref().unwrap();
        assert_eq!(h.weight.data(), &[1.0]);
        let h2 = rec.param_hess_app2.as_ref().unwrap()[0].as_ref().unwrap();
        assert_eq!(h2.weight.data(), &[9.0]);
    }

    #[test]
    fn relu_gradient_gates_by_sign() {
        // relu followed by an all-ones dense layer: loss gradient w.r.t. the
        // relu outputs is one, so w.r.t. its inputs it is the step function.
        let mut net = NetworkGraph::new(
            [2, 1, 1],
            &[LayerSpec::dense(2, 2).without_bias(), LayerSpec::relu(), LayerSpec::dense(2, 1).without_bias()],
            LossKind::MeanSquaredError,
        )
        .unwrap();
        net.weight_mut(0).unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        net.weight_mut(2).unwrap().data_mut().copy_from_slice(&[1.0, 1.0]);
        // Target below the output by exactly one so dL/dout = 1.
        let x = Tensor::new(vec![1, 2, 1, 1], vec![-1.0, 2.0]).unwrap();
        let t = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let mut rec = net.forward(&Batch::new(x, Targets::Values(t)).unwrap()).unwrap();
        backward(&net, &mut rec).unwrap();
        let g = rec.act_grad.as_ref().unwrap();
        assert_eq!(g[2].data(), &[1.0]);
        assert_eq!(g[1].data(), &[1.0, 1.0]);
        assert_eq!(g[0].data(), &[0.0, 1.0]);
    }

    #[test]
    fn linear_mse_app1_is_input_square() {
        let mut net = NetworkGraph::new([3, 1, 1], &[LayerSpec::dense(3, 2)], LossKind::MeanSquaredError).unwrap();
        net.weight_mut(0).unwrap().data_mut().copy_from_slice(&[0.3, -0.2, 0.5, 1.0, 0.7, -0.4]);
        let x = Tensor::new(vec![1, 3, 1, 1], vec![0.5, -2.0, 3.0]).unwrap();
        let t = Tensor::new(vec![1, 2, 1, 1], vec![0.1, 0.2]).unwrap();
        let rec = evaluate(&net, &Batch::new(x.clone(), Targets::Values(t)).unwrap(), true, false).unwrap();
        let h = rec.param_hess_app1.as_ref().unwrap()[0].as_ref().unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(h.weight.data()[i * 3 + j], x.data()[j] * x.data()[j]);
            }
        }
        assert_eq!(h.bias.as_ref().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_activations_into_relu_kill_second_derivatives() {
        let net = NetworkGraph::new(
            [2, 1, 1],
            &[LayerSpec::dense(2, 2), LayerSpec::relu(), LayerSpec::dense(2, 2)],
            LossKind::SoftmaxCrossEntropy,
        )
        .unwrap();
        // All weights zero, so the relu sees exact zeros.
        let x = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let rec = evaluate(&net, &Batch::new(x, Targets::Labels(vec![1])).unwrap(), true, false).unwrap();
        let h = rec.act_hess_app1.as_ref().unwrap();
        assert!(h[0].data().iter().all(|&v| v == 0.0));
        let hp = rec.param_hess_app1.as_ref().unwrap()[0].as_ref().unwrap();
        assert!(hp.weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn app2_squares_gradients() {
        let net = scalar_net(0.3);
        // L = (0.3*1 - 0)^2/2, dL/dw = 0.3
        let batch = Batch::new(
            Tensor::scalar(1.0).reshape(&[1, 1, 1, 1]).unwrap(),
            Targets::Values(Tensor::zeros(&[1, 1, 1, 1])),
        )
        .unwrap();
        let rec = evaluate(&net, &batch, false, true).unwrap();
        let h2 = rec.param_hess_app2.as_ref().unwrap()[0].as_ref().unwrap();
        assert!((h2.weight.data()[0] - 0.09).abs() < 1e-15);
        let z = evaluate(&scalar_net(0.0), &batch, false, true).unwrap();
        assert_eq!(z.param_hess_app2.as_ref().unwrap()[0].as_ref().unwrap().weight.data(), &[0.0]);
    }

    #[test]
    fn passes_require_their_prerequisites() {
        let net = scalar_net(1.0);
        let batch = Batch::new(
            Tensor::scalar(1.0).reshape(&[1, 1, 1, 1]).unwrap(),
            Targets::Values(Tensor::zeros(&[1, 1, 1, 1])),
        )
        .unwrap();
        let mut rec = net.forward(&batch).unwrap();
        assert!(matches!(hessian_diag_app1(&net, &mut rec), Err(Error::MissingPass(_))));
        assert!(matches!(hessian_diag_app2(&mut rec), Err(Error::MissingPass(_))));
        rec.activations.clear();
        assert!(matches!(backward(&net, &mut rec), Err(Error::MissingPass(_))));
    }

    #[test]
    fn accumulator_averages() {
        let net = scalar_net(2.0);
        let mk = |x: f64| {
            let b = Batch::new(
                Tensor::scalar(x).reshape(&[1, 1, 1, 1]).unwrap(),
                Targets::Values(Tensor::zeros(&[1, 1, 1, 1])),
            )
            .unwrap();
            evaluate(&net, &b, true, true).unwrap()
        };
        let (a, b) = (mk(1.0), mk(-1.0));
        let mut acc = BatchAccumulator::new();
        acc.accumulate(&a).unwrap();
        assert_eq!(acc.read_average().unwrap(), a);
        acc.accumulate(&b).unwrap();
        let avg = acc.read_average().unwrap();
        assert_eq!(avg.input.data(), &[0.0]);
        // d/dw (w x)^2/2 = w x^2 = 2 in both batches.
        assert_eq!(avg.param_grad.unwrap()[0].as_ref().unwrap().weight.data(), &[2.0]);
    }

    #[test]
    fn accumulator_rejects_drift() {
        let net = scalar_net(2.0);
        let b1 = Batch::new(Tensor::zeros(&[1, 1, 1, 1]), Targets::Values(Tensor::zeros(&[1, 1, 1, 1]))).unwrap();
        let b2 = Batch::new(Tensor::zeros(&[2, 1, 1, 1]), Targets::Values(Tensor::zeros(&[2, 1, 1, 1]))).unwrap();
        let mut acc = BatchAccumulator::new();
        acc.accumulate(&evaluate(&net, &b1, false, false).unwrap()).unwrap();
        assert!(acc.accumulate(&evaluate(&net, &b2, false, false).unwrap()).is_err());
        assert!(BatchAccumulator::new().read_average().is_err());
    }
}
