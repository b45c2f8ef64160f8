//! Feature extractor `g` and label-conditioned environment head `h`.
//!
//! Both are stacks of dense layers kept in one list: the first `g_len`
//! layers form `g` (activation between layers, linear output), the rest form
//! `h`, whose first layer reads `[g(x), one_hot(y)]` and whose last layer
//! emits one logit.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        if self == Activation::Relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
    }

    /// Multiply `grad` in place by the derivative at pre-activation `z`.
    fn backprop(self, z: &Array2<f64>, grad: &mut Array2<f64>) {
        if self == Activation::Relu {
            ndarray::Zip::from(grad).and(z).for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
        }
    }
}

/// Row-major `fan_in × fan_out` weights plus bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    /// Uniform in ±√(6 / (fan_in + fan_out)), zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut layer = Self::zeros(fan_in, fan_out);
        layer
            .weights
            .iter_mut()
            .for_each(|w| *w = rng.uniform_range(-limit, limit));
        layer
    }

    pub fn w(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.fan_in, self.fan_out), &self.weights).expect("shape")
    }

    pub fn forward(&self, input: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = input.dot(&self.w());
        z += &ndarray::aview1(&self.bias);
        z
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub g_len: usize,
    pub n_classes: usize,
    pub activation: Activation,
}

/// Cached intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input matrix of every layer.
    pub inputs: Vec<Array2<f64>>,
    /// Pre-activation output of every layer.
    pub pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// Layer widths: `in → hidden... → feature_dim` for `g`,
    /// `feature_dim + n_classes → head_hidden → 1` for `h` (no hidden layer
    /// when `head_hidden == 0`).
    pub fn new(
        in_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        n_classes: usize,
        head_hidden: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let mut widths = vec![in_dim];
        widths.extend_from_slice(hidden);
        widths.push(feature_dim);
        let mut layers: Vec<Dense> = widths
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        let g_len = layers.len();
        let head_in = feature_dim + n_classes;
        if head_hidden > 0 {
            layers.push(Dense::glorot(head_in, head_hidden, rng));
            layers.push(Dense::glorot(head_hidden, 1, rng));
        } else {
            layers.push(Dense::glorot(head_in, 1, rng));
        }
        Self {
            layers,
            g_len,
            n_classes,
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.g_len - 1].fan_out
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Dense::n_params).sum()
    }

    /// Same architecture, all parameters zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        out
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 != self.g_len && layer + 1 != self.layers.len()
    }

    /// Input of layer `layer + 1` given the pre-activation of `layer`.
    pub(crate) fn next_input(&self, layer: usize, pre: &Array2<f64>, onehot: &ArrayView2<f64>) -> Array2<f64> {
        let mut a = pre.clone();
        if self.activated(layer) {
            self.activation.apply(&mut a);
        }
        if layer + 1 == self.g_len {
            concatenate(Axis(1), &[a.view(), onehot.view()]).expect("row counts match")
        } else {
            a
        }
    }

    /// g(x) for every row of `x`.
    pub fn features(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for (i, layer) in self.layers[..self.g_len].iter().enumerate() {
            a = layer.forward(&a.view());
            if self.activated(i) {
                self.activation.apply(&mut a);
            }
        }
        a
    }

    pub fn one_hot(&self, labels: &[usize]) -> Array2<f64> {
        let mut m = Array2::zeros((labels.len(), self.n_classes));
        for (i, &y) in labels.iter().enumerate() {
            m[[i, y]] = 1.0;
        }
        m
    }

    /// Forward pass from layer `start` given that layer's input.
    pub fn forward_from(&self, start: usize, input: Array2<f64>, onehot: &ArrayView2<f64>) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len() - start);
        let mut pre = Vec::with_capacity(self.layers.len() - start);
        let mut a = input;
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            let z = layer.forward(&a.view());
            inputs.push(a);
            if i + 1 < self.layers.len() {
                a = self.next_input(i, &z, onehot);
            } else {
                a = Array2::zeros((0, 0));
            }
            pre.push(z);
        }
        Trace { inputs, pre }
    }

    pub fn forward(&self, x: &ArrayView2<f64>, onehot: &ArrayView2<f64>) -> Trace {
        self.forward_from(0, x.to_owned(), onehot)
    }

    /// Environment logits h(g(x), y).
    pub fn logits(&self, x: &ArrayView2<f64>, labels: &[usize]) -> Array1<f64> {
        let oh = self.one_hot(labels);
        let trace = self.forward(x, &oh.view());
        trace.pre.last().expect("non-empty").column(0).to_owned()
    }

    /// Mean binary cross-entropy of the logits against `envs`, and the
    /// gradient with respect to every parameter.
    pub fn loss_and_grad(&self, x: &ArrayView2<f64>, labels: &[usize], envs: &[f64]) -> (f64, Mlp) {
        let oh = self.one_hot(labels);
        let trace = self.forward(x, &oh.view());
        let logits = trace.pre.last().expect("non-empty").column(0);
        let b = envs.len() as f64;
        let loss = mean_bce(logits.iter().copied(), envs);

        let mut grads = self.zeros_like();
        let mut delta = Array2::zeros((envs.len(), 1));
        for (d, (&s, &e)) in delta.iter_mut().zip(logits.iter().zip(envs)) {
            *d = (sigmoid(s) - e) / b;
        }
        for i in (0..self.layers.len()).rev() {
            if self.activated(i) {
                self.activation.backprop(&trace.pre[i], &mut delta);
            }
            let input = &trace.inputs[i];
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            let g = &mut grads.layers[i];
            g.weights.copy_from_slice(gw.as_standard_layout().as_slice().expect("contiguous"));
            g.bias.copy_from_slice(gb.as_slice().expect("contiguous"));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].w().t());
                if i == self.g_len {
                    // drop the one-hot columns of the head input
                    back = back.slice(s![.., ..self.feature_dim()]).to_owned();
                }
                delta = back;
            }
        }
        (loss, grads)
    }

    pub fn loss(&self, x: &ArrayView2<f64>, labels: &[usize], envs: &[f64]) -> f64 {
        let logits = self.logits(x, labels);
        mean_bce(logits.iter().copied(), envs)
    }

    /// Parameter slices in a fixed order (per layer: weights, then bias).
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// ℓ(s, e) = softplus(s) − e·s, the cross-entropy of sigmoid(s) against e.
pub fn bce_with_logit(s: f64, e: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p() - e * s
}

fn mean_bce(logits: impl Iterator<Item = f64>, envs: &[f64]) -> f64 {
    if envs.is_empty() {
        return 0.0;
    }
    logits.zip(envs).map(|(s, &e)| bce_with_logit(s, e)).sum::<f64>() / envs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sigmoid_and_bce_are_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) <= 1.0 && sigmoid(-800.0) >= 0.0);
        assert!((bce_with_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_with_logit(-800.0, 1.0).is_finite());
        assert!((bce_with_logit(-800.0, 1.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn head_output_is_probability() {
        let mut rng = Rng::new(1);
        let net = Mlp::new(3, &[5], 2, 2, 4, Activation::Relu, &mut rng);
        let x = array![[0.1, -2.0, 3.0], [10.0, 10.0, -10.0]];
        for s in net.logits(&x.view(), &[0, 1]) {
            let p = sigmoid(s);
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn shapes() {
        let mut rng = Rng::new(2);
        let net = Mlp::new(7, &[6, 5], 3, 4, 0, Activation::Relu, &mut rng);
        assert_eq!(net.g_len, 3);
        assert_eq!(net.layers.len(), 4);
        assert_eq!(net.layers[3].fan_in, 7);
        assert_eq!(net.feature_dim(), 3);
        let x = Array2::zeros((0, 7));
        assert_eq!(net.features(&x.view()).dim(), (0, 3));
    }
}
