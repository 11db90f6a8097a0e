use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::autoencoder::{AeFeed, Autoencoder};
use super::network::{softmax_rows, Activation, Loss, Network, Targets};
use super::train::{sgd, TrainConfig, TrainReport};
use crate::domain::HospitalLevel;
use crate::error::{Error, Result};
use crate::features::FEATURE_COUNT;
use crate::scalar::Scalar;

/// Layer widths of the classifier; hidden layers use ReLU, the output is a
/// softmax over the classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub layer_sizes: Vec<usize>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            layer_sizes: vec![FEATURE_COUNT, 100, 100, 100, HospitalLevel::COUNT],
        }
    }
}

impl MlpConfig {
    pub fn with_input(mut self, width: usize) -> Self {
        self.layer_sizes[0] = width;
        self
    }

    fn activations(&self) -> Vec<Activation> {
        let n = self.layer_sizes.len() - 1;
        (0..n)
            .map(|i| {
                if i + 1 < n {
                    Activation::Relu
                } else {
                    Activation::Identity
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "invalid classifier widths {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }
}

/// Feed-forward classifier. The network emits logits; probabilities come from
/// a softmax over them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier<T> {
    pub network: Network<T>,
}

impl<T: Scalar> Classifier<T> {
    /// Seeded fan-in uniform initialization.
    pub fn init(config: &MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tc = TrainConfig {
            seed,
            ..Default::default()
        };
        let network = Network::init(&config.layer_sizes, &config.activations(), &mut tc.init_rng())?;
        Ok(Classifier { network })
    }

    pub fn from_network(network: Network<T>) -> Self {
        Classifier { network }
    }

    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.network.output_dim()
    }

    pub fn logits_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.network.forward_batch(x)
    }

    pub fn predict_proba_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        Ok(softmax_rows(&self.logits_batch(x)?))
    }

    /// Class probabilities for one input.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        let row = Array1::from(x.to_vec()).insert_axis(Axis(0));
        Ok(self.predict_proba_batch(row.view())?.row(0).to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trained<M, T> {
    pub model: M,
    pub config: TrainConfig,
    pub report: TrainReport<T>,
}

pub type TrainedClassifier<T> = Trained<Classifier<T>, T>;

/// Initializes from `config.seed` and trains with softmax cross-entropy.
pub fn train_classifier<T: Scalar>(
    rows: ArrayView2<T>,
    labels: &[usize],
    mlp: &MlpConfig,
    config: &TrainConfig,
) -> Result<TrainedClassifier<T>> {
    let mut model = Classifier::init(mlp, config.seed)?;
    let report = sgd(
        &mut model.network,
        Loss::SoftmaxCrossEntropy,
        rows,
        Targets::Classes(labels),
        config,
    )?;
    Ok(Trained {
        model,
        config: *config,
        report,
    })
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub level: HospitalLevel,
    pub probabilities: Vec<T>,
}

/// Classifies one scaled feature vector, optionally through an autoencoder.
pub fn predict<T: Scalar>(
    classifier: &Classifier<T>,
    x: &[T],
    ae: Option<(&Autoencoder<T>, AeFeed)>,
) -> Result<Prediction<T>> {
    let input = match ae {
        None => x.to_vec(),
        Some((ae, feed)) => ae.represent(x, feed)?,
    };
    if input.len() != classifier.input_dim() {
        return Err(Error::Shape {
            context: "classifier input width",
            expected: classifier.input_dim(),
            found: input.len(),
        });
    }
    let probabilities = classifier.forward(&input)?;
    let index = argmax(&probabilities);
    let level = HospitalLevel::from_index(index)
        .ok_or_else(|| Error::InvalidInput(format!("class index {index} is not a hospital level")))?;
    Ok(Prediction { level, probabilities })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::network::LayerParams;
    use ndarray::array;

    #[test]
    fn zero_network_is_uniform() {
        let net = Network::new(
            vec![LayerParams::<f64>::zeros(18, 5), LayerParams::zeros(5, 4)],
            vec![Activation::Relu, Activation::Identity],
        )
        .unwrap();
        let p = Classifier::from_network(net).forward(&[0.3; 18]).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn one_hidden_unit_golden_value() {
        // h = relu(0.5*x1 - 0.25*x2 + 0.1) = relu(0.5 - 0.5 + 0.1) = 0.1 for x = (1, 2)
        // logits = (2h, -h, 0) + (0, 0, 0.3) = (0.2, -0.1, 0.3)
        let hidden = LayerParams {
            weights: array![[0.5, -0.25]],
            biases: array![0.1],
        };
        let out = LayerParams {
            weights: array![[2.0], [-1.0], [0.0]],
            biases: array![0.0, 0.0, 0.3],
        };
        let clf = Classifier::from_network(
            Network::new(vec![hidden, out], vec![Activation::Relu, Activation::Identity]).unwrap(),
        );
        let p = clf.forward(&[1.0, 2.0]).unwrap();
        let e = [0.2f64.exp(), (-0.1f64).exp(), 0.3f64.exp()];
        let z: f64 = e.iter().sum();
        for (got, want) in p.iter().zip(e.iter().map(|v| v / z)) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
        // hand-evaluated: exp(.2)/(exp(.2)+exp(-.1)+exp(.3))
        assert!((p[0] - 0.351_371_685_289).abs() < 1e-9);
    }

    #[test]
    fn argmax_prefers_smallest_index_on_ties() {
        assert_eq!(argmax(&[0.1, 0.2, 0.6, 0.1]), 2);
        assert_eq!(argmax(&[0.4, 0.1, 0.4, 0.1]), 0);
        assert_eq!(argmax(&[0.25f64; 4]), 0);
    }

    #[test]
    fn predict_maps_argmax_to_level() {
        let mut net = Network::new(vec![LayerParams::<f64>::zeros(2, 4)], vec![Activation::Identity]).unwrap();
        net.layers[0].biases = array![0.0, 1.0, 3.0, 0.0];
        let clf = Classifier::from_network(net);
        let pred = predict(&clf, &[0.0, 0.0], None).unwrap();
        assert_eq!(pred.level, HospitalLevel::DistrictHospital);
        assert!(predict(&clf, &[0.0; 3], None).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let clf: Classifier<f64> = Classifier::init(&MlpConfig::default(), 3).unwrap();
        for k in 0..20 {
            let x: Vec<f64> = (0..18).map(|i| ((i * 7 + k * 3) % 11) as f64 / 10.0).collect();
            let p = clf.forward(&x).unwrap();
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
