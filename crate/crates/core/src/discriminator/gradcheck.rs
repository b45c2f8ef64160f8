//! Central finite-difference check of the backpropagated gradients.
//!
//! Perturbing weight `(i, j)` or bias `j` of a layer only moves column `j`
//! of that layer's pre-activation, so each probe patches that column and
//! re-runs the network from the following layer. The loss itself is
//! evaluated in full for every probe.

use ndarray::{Array2, ArrayView2};

use super::mlp::{bce_with_logit, Mlp};
use super::MlpConfig;
use crate::rng::Rng;

const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / scale
}

fn loss_from_logits(logits: ArrayView2<f64>, envs: &[f64]) -> f64 {
    logits
        .column(0)
        .iter()
        .zip(envs)
        .map(|(&s, &e)| bce_with_logit(s, e))
        .sum::<f64>()
        / envs.len() as f64
}

/// Loss after replacing column `col` of layer `layer`'s pre-activation.
fn loss_with_column(
    net: &Mlp,
    base_pre: &Array2<f64>,
    layer: usize,
    col: usize,
    column: &[f64],
    onehot: &ArrayView2<f64>,
    envs: &[f64],
) -> f64 {
    let mut pre = base_pre.clone();
    pre.column_mut(col)
        .iter_mut()
        .zip(column)
        .for_each(|(p, &c)| *p = c);
    if layer + 1 == net.layers.len() {
        return loss_from_logits(pre.view(), envs);
    }
    let next = net.next_input(layer, &pre, onehot);
    let trace = net.forward_from(layer + 1, next, onehot);
    loss_from_logits(trace.pre.last().expect("non-empty").view(), envs)
}

/// Max relative error between analytic and finite-difference gradients of
/// the mean cross-entropy over the batch `(x, labels, envs)`. An empty batch
/// has error 0.
pub fn grad_check_batch(net: &Mlp, x: &ArrayView2<f64>, labels: &[usize], envs: &[f64]) -> f64 {
    if envs.is_empty() {
        return 0.0;
    }
    let (_, grads) = net.loss_and_grad(x, labels, envs);
    let onehot = net.one_hot(labels);
    let trace = net.forward(x, &onehot.view());
    let mut worst: f64 = 0.0;
    for (l, layer) in net.layers.iter().enumerate() {
        let input = &trace.inputs[l];
        let pre = &trace.pre[l];
        let mut column = vec![0.0; pre.nrows()];
        let mut probe = |col: usize, shift: &dyn Fn(usize) -> f64| -> f64 {
            for (r, c) in column.iter_mut().enumerate() {
                *c = pre[[r, col]] + shift(r);
            }
            let up = loss_with_column(net, pre, l, col, &column, &onehot.view(), envs);
            for (r, c) in column.iter_mut().enumerate() {
                *c = pre[[r, col]] - shift(r);
            }
            let down = loss_with_column(net, pre, l, col, &column, &onehot.view(), envs);
            (up - down) / (2.0 * STEP)
        };
        for i in 0..layer.fan_in {
            for j in 0..layer.fan_out {
                let numeric = probe(j, &|r| STEP * input[[r, i]]);
                let analytic = grads.layers[l].weights[i * layer.fan_out + j];
                worst = worst.max(relative_error(analytic, numeric));
            }
        }
        for j in 0..layer.fan_out {
            let numeric = probe(j, &|_| STEP);
            worst = worst.max(relative_error(grads.layers[l].bias[j], numeric));
        }
    }
    worst
}

/// Build a network from `cfg` with small random biases, draw a random batch
/// of `2 · batch_per_env` rows, and check every parameter's gradient.
pub fn grad_check(cfg: &MlpConfig, rng: &mut Rng) -> f64 {
    let mut net = cfg.build(rng);
    for layer in &mut net.layers {
        layer.bias.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
    }
    let n = 2 * cfg.batch_per_env;
    let x = Array2::from_shape_fn((n, cfg.in_dim), |_| rng.normal());
    let labels: Vec<usize> = (0..n).map(|_| rng.below(cfg.n_classes)).collect();
    let envs: Vec<f64> = (0..n).map(|k| if k < n / 2 { 0.0 } else { 1.0 }).collect();
    grad_check_batch(&net, &x.view(), &labels, &envs)
}
