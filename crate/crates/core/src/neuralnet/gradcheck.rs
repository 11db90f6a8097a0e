use ndarray::ArrayView2;

use super::network::{loss_gradients, Loss, Network, Targets};
use crate::scalar::Scalar;

/// Central difference step used by [`gradient_check`] in double precision.
pub const FD_STEP: f64 = 1e-5;

/// Largest relative disagreement between backprop and central finite
/// differences, `|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)`, over all parameters.
pub fn gradient_check<T: Scalar>(net: &Network<T>, loss: Loss, inputs: ArrayView2<T>, targets: Targets<T>) -> T {
    gradient_check_with_step(net, loss, inputs, targets, T::lit(FD_STEP))
}

pub fn gradient_check_with_step<T: Scalar>(
    net: &Network<T>,
    loss: Loss,
    inputs: ArrayView2<T>,
    targets: Targets<T>,
    step: T,
) -> T {
    let analytic = loss_gradients(net, loss, inputs, targets).1.flatten();
    let numeric = numerical_gradient(net, loss, inputs, targets, step);
    let floor = T::lit(1e-8);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(T::zero(), T::max)
}

/// Central differences of the mean batch loss for every parameter.
pub fn numerical_gradient<T: Scalar>(
    net: &Network<T>,
    loss: Loss,
    inputs: ArrayView2<T>,
    targets: Targets<T>,
    step: T,
) -> Vec<T> {
    let mut probe = net.clone();
    let eval = |n: &Network<T>| loss.value(&n.forward_range(inputs, 0..n.layers.len()), targets);
    let two = T::lit(2.0);
    (0..net.parameter_count())
        .map(|i| {
            let original = *probe.parameter_mut(i);
            *probe.parameter_mut(i) = original + step;
            let up = eval(&probe);
            *probe.parameter_mut(i) = original - step;
            let down = eval(&probe);
            *probe.parameter_mut(i) = original;
            (up - down) / (two * step)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::network::{Activation, LayerParams};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_squared_error_matches_closed_form() {
        // one sample, one output: dL/dW = 2 (yhat - y) x^T, dL/db = 2 (yhat - y)
        let layer = LayerParams {
            weights: array![[0.3f64, -0.7, 1.1]],
            biases: array![0.05],
        };
        let net = Network::new(vec![layer], vec![Activation::Identity]).unwrap();
        let x = array![[0.2, 0.9, -0.4]];
        let y = array![[0.5]];
        let yhat: f64 = 0.3 * 0.2 - 0.7 * 0.9 + 1.1 * -0.4 + 0.05;
        let (_, g) = loss_gradients(&net, Loss::MeanSquaredError, x.view(), Targets::Values(y.view()));
        let r = 2.0 * (yhat - 0.5);
        for (got, xi) in g.layers[0].weights.iter().zip([0.2, 0.9, -0.4]) {
            assert!((got - r * xi).abs() < 1e-7);
        }
        assert!((g.layers[0].biases[0] - r).abs() < 1e-7);
    }

    #[test]
    fn exact_fit_has_zero_gradient() {
        let layer = LayerParams {
            weights: array![[0.5f64, 0.25]],
            biases: array![0.1],
        };
        let net = Network::new(vec![layer], vec![Activation::Identity]).unwrap();
        let x = array![[1.0, 2.0], [0.0, 4.0]];
        let y = net.forward_batch(x.view()).unwrap();
        let (value, g) = loss_gradients(&net, Loss::MeanSquaredError, x.view(), Targets::Values(y.view()));
        assert_eq!(value, 0.0);
        assert!(g.norm() < 1e-10);
    }

    #[test]
    fn small_classifier_backprop_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net: Network<f64> =
            Network::init(&[18, 8, 4], &[Activation::Relu, Activation::Identity], &mut rng).unwrap();
        let x = Array2::from_shape_simple_fn((16, 18), || rng.random::<f64>());
        let y: Vec<usize> = (0..16).map(|_| rng.random_range(0..4)).collect();
        let err = gradient_check(&net, Loss::SoftmaxCrossEntropy, x.view(), Targets::Classes(&y));
        assert!(err < 1e-4, "max relative error {err}");
    }
}
