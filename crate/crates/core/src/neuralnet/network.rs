use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply<T: Scalar>(self, z: &mut Array2<T>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the layer output.
    fn backprop<T: Scalar>(self, output: &Array2<T>, grad: &mut Array2<T>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad.zip_mut_with(output, |g, &a| {
                if a <= T::zero() {
                    *g = T::zero();
                }
            }),
            Activation::Sigmoid => grad.zip_mut_with(output, |g, &a| *g = *g * a * (T::one() - a)),
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Weights (`out x in`) and biases of one fully connected layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub weights: Array2<T>,
    pub biases: Array1<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LayerParams {
            weights: Array2::zeros((out_dim, in_dim)),
            biases: Array1::zeros(out_dim),
        }
    }

    /// Uniform on `[-a, a]` with `a = sqrt(6 / fan_in)`; zero biases.
    pub fn fan_in_uniform<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let a = (6.0 / in_dim.max(1) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((out_dim, in_dim), || T::lit(rng.random_range(-a..=a)));
        LayerParams {
            weights,
            biases: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.biases.iter()).all(|v| v.is_finite())
    }
}

/// A stack of fully connected layers, each followed by its activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network<T> {
    pub layers: Vec<LayerParams<T>>,
    pub activations: Vec<Activation>,
}

impl<T: Scalar> Network<T> {
    pub fn new(layers: Vec<LayerParams<T>>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() || layers.len() != activations.len() {
            return Err(Error::InvalidInput(format!(
                "{} layers but {} activations",
                layers.len(),
                activations.len()
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::InvalidInput(format!(
                    "layer {} expects width {} but layer {} produces {}",
                    i + 1,
                    pair[1].in_dim(),
                    i,
                    pair[0].out_dim()
                )));
            }
        }
        for l in &layers {
            if l.biases.len() != l.out_dim() {
                return Err(Error::Shape {
                    context: "bias length",
                    expected: l.out_dim(),
                    found: l.biases.len(),
                });
            }
        }
        Ok(Network { layers, activations })
    }

    pub fn init<R: Rng>(sizes: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.len() - 1 != activations.len() {
            return Err(Error::InvalidInput(format!(
                "{} layer sizes need {} activations, got {}",
                sizes.len(),
                sizes.len().saturating_sub(1),
                activations.len()
            )));
        }
        let layers = sizes
            .windows(2)
            .map(|w| LayerParams::fan_in_uniform(w[0], w[1], rng))
            .collect();
        Network::new(layers, activations.to_vec())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(LayerParams::out_dim))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(LayerParams::is_finite)
    }

    pub(crate) fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input_dim() {
            return Err(Error::Shape {
                context: "network input width",
                expected: self.input_dim(),
                found: width,
            });
        }
        Ok(())
    }

    /// Runs layers `range` over a batch (rows are samples).
    pub fn forward_range(&self, x: ArrayView2<T>, range: std::ops::Range<usize>) -> Array2<T> {
        let mut a = x.to_owned();
        for i in range {
            a = self.layer_forward(i, a.view());
        }
        a
    }

    /// Output of the last layer after its activation.
    pub fn forward_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(x.ncols())?;
        Ok(self.forward_range(x, 0..self.layers.len()))
    }

    fn layer_forward(&self, i: usize, a: ArrayView2<T>) -> Array2<T> {
        let layer = &self.layers[i];
        let mut z = a.dot(&layer.weights.t());
        z += &layer.biases;
        self.activations[i].apply(&mut z);
        z
    }

    /// Activations of every layer, input first.
    pub fn forward_trace(&self, x: ArrayView2<T>) -> Vec<Array2<T>> {
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(x.to_owned());
        for i in 0..self.layers.len() {
            let next = self.layer_forward(i, trace[i].view());
            trace.push(next);
        }
        trace
    }

    /// Parameter gradients given `d_output`, the loss gradient with respect to
    /// the final layer's activated output.
    pub fn backward(&self, trace: &[Array2<T>], d_output: Array2<T>) -> Gradients<T> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_output;
        for i in (0..self.layers.len()).rev() {
            self.activations[i].backprop(&trace[i + 1], &mut delta);
            let weights = delta.t().dot(&trace[i]);
            let biases = delta.sum_axis(Axis(0));
            if i > 0 {
                delta = delta.dot(&self.layers[i].weights);
            }
            grads.push(LayerParams { weights, biases });
        }
        grads.reverse();
        Gradients { layers: grads }
    }

    pub fn apply_gradients(&mut self, grads: &Gradients<T>, learning_rate: T) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights.scaled_add(-learning_rate, &g.weights);
            layer.biases.scaled_add(-learning_rate, &g.biases);
        }
    }

    /// All parameters in a fixed order: per layer, weights row-major then biases.
    pub fn parameters(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
            .collect()
    }

    pub(crate) fn parameter_mut(&mut self, mut index: usize) -> &mut T {
        for l in &mut self.layers {
            let nw = l.weights.len();
            if index < nw {
                let cols = l.weights.ncols();
                return &mut l.weights[(index / cols, index % cols)];
            }
            index -= nw;
            if index < l.biases.len() {
                return &mut l.biases[index];
            }
            index -= l.biases.len();
        }
        panic!("parameter index out of range");
    }
}

/// Gradients with the same shapes as the network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
            .collect()
    }

    pub fn norm(&self) -> T {
        self.flatten().iter().fold(T::zero(), |acc, &g| acc + g * g).sqrt()
    }
}

/// Training targets matching the loss.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a, T> {
    Classes(&'a [usize]),
    Values(ArrayView2<'a, T>),
}

impl<'a, T: Scalar> Targets<'a, T> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn select(&self, rows: &[usize]) -> OwnedTargets<T> {
        match self {
            Targets::Classes(c) => OwnedTargets::Classes(rows.iter().map(|&r| c[r]).collect()),
            Targets::Values(v) => OwnedTargets::Values(v.select(Axis(0), rows)),
        }
    }

    pub(crate) fn slice(&self, start: usize, end: usize) -> Targets<'a, T> {
        match *self {
            Targets::Classes(c) => Targets::Classes(&c[start..end]),
            Targets::Values(v) => Targets::Values(v.slice_move(ndarray::s![start..end, ..])),
        }
    }
}

pub(crate) enum OwnedTargets<T> {
    Classes(Vec<usize>),
    Values(Array2<T>),
}

impl<T: Scalar> OwnedTargets<T> {
    pub(crate) fn view(&self) -> Targets<'_, T> {
        match self {
            OwnedTargets::Classes(c) => Targets::Classes(c),
            OwnedTargets::Values(v) => Targets::Values(v.view()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    /// Softmax over the (identity-activated) outputs, then mean negative
    /// log-likelihood of the target class.
    SoftmaxCrossEntropy,
    /// Mean over samples and components of the squared difference.
    MeanSquaredError,
}

impl Loss {
    /// Sum (not mean) of the per-sample losses of a batch.
    pub fn batch_sum<T: Scalar>(self, output: &Array2<T>, targets: Targets<T>) -> T {
        match (self, targets) {
            (Loss::SoftmaxCrossEntropy, Targets::Classes(classes)) => output
                .rows()
                .into_iter()
                .zip(classes)
                .fold(T::zero(), |acc, (row, &c)| {
                    acc + log_sum_exp(row.iter().copied()) - row[c]
                }),
            (Loss::MeanSquaredError, Targets::Values(y)) => {
                let d = T::from_count(output.ncols().max(1));
                output
                    .iter()
                    .zip(y.iter())
                    .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
                    / d
            }
            _ => panic!("loss and target kinds do not match"),
        }
    }

    pub fn value<T: Scalar>(self, output: &Array2<T>, targets: Targets<T>) -> T {
        self.batch_sum(output, targets) / T::from_count(output.nrows().max(1))
    }

    /// Mean loss and its gradient with respect to `output`.
    pub fn value_and_grad<T: Scalar>(self, output: &Array2<T>, targets: Targets<T>) -> (T, Array2<T>) {
        let n = T::from_count(output.nrows().max(1));
        let value = self.value(output, targets);
        let grad = match (self, targets) {
            (Loss::SoftmaxCrossEntropy, Targets::Classes(classes)) => {
                let mut p = softmax_rows(output);
                for (mut row, &c) in p.rows_mut().into_iter().zip(classes) {
                    row[c] -= T::one();
                }
                p.mapv_inplace(|v| v / n);
                p
            }
            (Loss::MeanSquaredError, Targets::Values(y)) => {
                let scale = T::lit(2.0) / (n * T::from_count(output.ncols().max(1)));
                let mut g = output - &y;
                g.mapv_inplace(|v| v * scale);
                g
            }
            _ => panic!("loss and target kinds do not match"),
        };
        (value, grad)
    }

    pub(crate) fn check_targets<T: Scalar>(self, targets: &Targets<T>, output_dim: usize) -> Result<()> {
        match (self, targets) {
            (Loss::SoftmaxCrossEntropy, Targets::Classes(c)) => match c.iter().find(|&&c| c >= output_dim) {
                Some(&bad) => Err(Error::InvalidInput(format!("class {bad} >= output width {output_dim}"))),
                None => Ok(()),
            },
            (Loss::MeanSquaredError, Targets::Values(v)) if v.ncols() == output_dim => Ok(()),
            (Loss::MeanSquaredError, Targets::Values(v)) => Err(Error::Shape {
                context: "regression target width",
                expected: output_dim,
                found: v.ncols(),
            }),
            _ => Err(Error::InvalidInput("loss and target kinds do not match".into())),
        }
    }
}

fn log_sum_exp<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> T {
    let max = values.clone().fold(T::neg_infinity(), T::max);
    max + values.fold(T::zero(), |acc, v| acc + (v - max).exp()).ln()
}

pub fn softmax_rows<T: Scalar>(z: &Array2<T>) -> Array2<T> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().copied().fold(T::zero(), |a, b| a + b);
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Loss and parameter gradients for one batch.
pub fn loss_gradients<T: Scalar>(
    net: &Network<T>,
    loss: Loss,
    inputs: ArrayView2<T>,
    targets: Targets<T>,
) -> (T, Gradients<T>) {
    let trace = net.forward_trace(inputs);
    let (value, d_out) = loss.value_and_grad(&trace[trace.len() - 1], targets);
    (value, net.backward(&trace, d_out))
}
