use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{loss_gradients, Loss, Network, Targets};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mini-batch SGD settings. Plain SGD, no momentum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, rows: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.batch_size > rows {
            return Err(Error::Config(format!(
                "batch_size {} must lie in 1..={rows} (training rows)",
                self.batch_size
            )));
        }
        Ok(())
    }

    /// Stream 0 initializes weights, stream 1 shuffles batches.
    pub(crate) fn init_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn shuffle_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport<T> {
    /// Full-data loss of the initialized network.
    pub initial_loss: T,
    /// Full-data loss after each epoch.
    pub loss_trace: Vec<T>,
}

impl<T: Scalar> TrainReport<T> {
    pub fn final_loss(&self) -> T {
        self.loss_trace.last().copied().unwrap_or(self.initial_loss)
    }
}

const EVAL_CHUNK: usize = 2048;

/// Mean loss over all rows, evaluated in chunks.
pub fn dataset_loss<T: Scalar>(net: &Network<T>, loss: Loss, inputs: ArrayView2<T>, targets: Targets<T>) -> T {
    let n = inputs.nrows();
    let mut total = T::zero();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let out = net.forward_range(inputs.slice(ndarray::s![start..end, ..]), 0..net.layers.len());
        total += loss.batch_sum(&out, targets.slice(start, end));
        start = end;
    }
    total / T::from_count(n.max(1))
}

/// Trains `net` in place. Rows are reshuffled every epoch; the last batch of
/// an epoch may be short.
pub fn sgd<T: Scalar>(
    net: &mut Network<T>,
    loss: Loss,
    inputs: ArrayView2<T>,
    targets: Targets<T>,
    config: &TrainConfig,
) -> Result<TrainReport<T>> {
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::InvalidInput("no training rows".into()));
    }
    if targets.len() != n {
        return Err(Error::LengthMismatch {
            labels: targets.len(),
            predictions: n,
        });
    }
    net.check_input(inputs.ncols())?;
    loss.check_targets(&targets, net.output_dim())?;
    config.validate(n)?;

    let lr = T::lit(config.learning_rate);
    let initial_loss = dataset_loss(net, loss, inputs, targets);
    if !initial_loss.is_finite() {
        return Err(Error::Divergence { epoch: 0 });
    }
    let mut rng = config.shuffle_rng();
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let x = inputs.select(Axis(0), batch);
            let y = targets.select(batch);
            let (_, grads) = loss_gradients(net, loss, x.view(), y.view());
            net.apply_gradients(&grads, lr);
        }
        let value = dataset_loss(net, loss, inputs, targets);
        if !value.is_finite() || !net.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        loss_trace.push(value);
    }
    Ok(TrainReport {
        initial_loss,
        loss_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{train_autoencoder, train_classifier, Activation, AeConfig, Classifier, MlpConfig};
    use ndarray::Array2;
    use rand::Rng;

    fn blobs(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let x = Array2::from_shape_fn((n, 18), |(i, j)| {
            let centre = if j % 4 == labels[i] { 0.8 } else { 0.2 };
            centre + 0.1 * (rng.random::<f64>() - 0.5)
        });
        (x, labels)
    }

    fn small_mlp() -> MlpConfig {
        MlpConfig {
            layer_sizes: vec![18, 16, 4],
        }
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let (x, y) = blobs(40, 1);
        let cfg = TrainConfig {
            epochs: 0,
            seed: 9,
            batch_size: 8,
            ..Default::default()
        };
        let trained = train_classifier(x.view(), &y, &small_mlp(), &cfg).unwrap();
        assert_eq!(trained.model, Classifier::init(&small_mlp(), 9).unwrap());
        assert!(trained.report.loss_trace.is_empty());
    }

    #[test]
    fn same_seed_same_weights() {
        let (x, y) = blobs(64, 2);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed: 4,
            ..Default::default()
        };
        let a = train_classifier(x.view(), &y, &small_mlp(), &cfg).unwrap();
        let b = train_classifier(x.view(), &y, &small_mlp(), &cfg).unwrap();
        assert_eq!(a.model, b.model);
        let c = train_classifier(x.view(), &y, &small_mlp(), &TrainConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (x, y) = blobs(200, 3);
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 16,
            learning_rate: 0.1,
            seed: 1,
        };
        let trained = train_classifier(x.view(), &y, &small_mlp(), &cfg).unwrap();
        assert!(trained.report.final_loss() < 0.5 * trained.report.initial_loss);
        let p = trained.model.predict_proba_batch(x.view()).unwrap();
        let correct = p
            .rows()
            .into_iter()
            .zip(&y)
            .filter(|(r, &l)| crate::neuralnet::argmax(r.as_slice().unwrap()) == l)
            .count();
        assert!(correct as f64 / 200.0 > 0.95);
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net: Network<f64> =
            Network::init(&[18, 4, 18], &[Activation::Relu, Activation::Identity], &mut rng).unwrap();
        let x = Array2::from_elem((32, 18), 50.0);
        let cfg = TrainConfig {
            learning_rate: 1e6,
            batch_size: 8,
            epochs: 20,
            seed: 0,
        };
        let err = sgd(
            &mut net,
            Loss::MeanSquaredError,
            x.view(),
            Targets::Values(x.view()),
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let (x, y) = blobs(10, 0);
        for cfg in [
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 11,
                ..Default::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                batch_size: 2,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                train_classifier(x.view(), &y, &small_mlp(), &cfg),
                Err(Error::Config(_))
            ));
        }
        assert!(train_classifier(
            x.view(),
            &y[..9],
            &small_mlp(),
            &TrainConfig {
                batch_size: 2,
                ..Default::default()
            }
        )
        .is_err());
        let bad = vec![7usize; 10];
        assert!(train_classifier(
            x.view(),
            &bad,
            &small_mlp(),
            &TrainConfig {
                batch_size: 2,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn autoencoder_memorizes_a_single_row() {
        let row: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let x = Array2::from_shape_fn((32, 18), |(_, j)| row[j]);
        let ae = AeConfig {
            encoder_sizes: vec![18, 20, 8],
            decoder_sizes: vec![8, 20, 18],
        };
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 8,
            epochs: 200,
            seed: 2,
        };
        let trained = train_autoencoder(x.view(), &ae, &cfg).unwrap();
        let mse = trained.model.reconstruction_mse(x.view()).unwrap();
        assert!(mse < 1e-3, "mse {mse}");
        assert!((mse - trained.report.final_loss()).abs() < 1e-15);
    }
}
