use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::classifier::Trained;
use super::network::{Activation, Loss, Network, Targets};
use super::train::{sgd, TrainConfig};
use crate::error::{Error, Result};
use crate::features::FEATURE_COUNT;
use crate::scalar::Scalar;

/// Encoder and decoder widths. Hidden layers use ReLU, the last encoder layer
/// (the latent code) a sigmoid, and the reconstruction layer is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AeConfig {
    pub encoder_sizes: Vec<usize>,
    pub decoder_sizes: Vec<usize>,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            encoder_sizes: vec![FEATURE_COUNT, 500, 250, 100],
            decoder_sizes: vec![100, 250, 500, FEATURE_COUNT],
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        let (enc, dec) = (&self.encoder_sizes, &self.decoder_sizes);
        if enc.len() < 2 || dec.len() < 2 || enc.contains(&0) || dec.contains(&0) {
            return Err(Error::Config(format!("invalid autoencoder widths {enc:?} / {dec:?}")));
        }
        if enc.last() != dec.first() {
            return Err(Error::Config("decoder must start at the latent width".into()));
        }
        if enc.first() != dec.last() {
            return Err(Error::Config("reconstruction width must equal the input width".into()));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        *self.encoder_sizes.last().expect("validated")
    }

    fn sizes_and_activations(&self) -> (Vec<usize>, Vec<Activation>) {
        let enc_layers = self.encoder_sizes.len() - 1;
        let dec_layers = self.decoder_sizes.len() - 1;
        let mut acts = vec![Activation::Relu; enc_layers - 1];
        acts.push(Activation::Sigmoid);
        acts.extend(std::iter::repeat_n(Activation::Relu, dec_layers - 1));
        acts.push(Activation::Identity);
        let mut sizes = self.encoder_sizes.clone();
        sizes.extend_from_slice(&self.decoder_sizes[1..]);
        (sizes, acts)
    }
}

/// What the downstream classifier receives from the autoencoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AeFeed {
    #[default]
    Latent,
    Reconstruction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder<T> {
    pub network: Network<T>,
    /// Number of leading layers forming the encoder.
    pub encoder_layers: usize,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn init(config: &AeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (sizes, acts) = config.sizes_and_activations();
        let tc = TrainConfig {
            seed,
            ..Default::default()
        };
        let network = Network::init(&sizes, &acts, &mut tc.init_rng())?;
        Ok(Autoencoder {
            network,
            encoder_layers: config.encoder_sizes.len() - 1,
        })
    }

    pub fn from_network(network: Network<T>, encoder_layers: usize) -> Result<Self> {
        if encoder_layers == 0 || encoder_layers >= network.layers.len() {
            return Err(Error::InvalidInput(format!(
                "encoder layer count {encoder_layers} must split {} layers",
                network.layers.len()
            )));
        }
        Ok(Autoencoder {
            network,
            encoder_layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.network.layers[self.encoder_layers - 1].out_dim()
    }

    pub fn encode_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.network.check_input(x.ncols())?;
        Ok(self.network.forward_range(x, 0..self.encoder_layers))
    }

    pub fn decode_batch(&self, z: ArrayView2<T>) -> Result<Array2<T>> {
        if z.ncols() != self.latent_dim() {
            return Err(Error::Shape {
                context: "latent width",
                expected: self.latent_dim(),
                found: z.ncols(),
            });
        }
        Ok(self
            .network
            .forward_range(z, self.encoder_layers..self.network.layers.len()))
    }

    pub fn reconstruct_batch(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.network.forward_batch(x)
    }

    pub fn represent_batch(&self, x: ArrayView2<T>, feed: AeFeed) -> Result<Array2<T>> {
        match feed {
            AeFeed::Latent => self.encode_batch(x),
            AeFeed::Reconstruction => self.reconstruct_batch(x),
        }
    }

    pub fn encode(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.encode_batch(row(x).view())?.row(0).to_vec())
    }

    pub fn decode(&self, z: &[T]) -> Result<Vec<T>> {
        Ok(self.decode_batch(row(z).view())?.row(0).to_vec())
    }

    pub fn represent(&self, x: &[T], feed: AeFeed) -> Result<Vec<T>> {
        Ok(self.represent_batch(row(x).view(), feed)?.row(0).to_vec())
    }

    pub fn representation_dim(&self, feed: AeFeed) -> usize {
        match feed {
            AeFeed::Latent => self.latent_dim(),
            AeFeed::Reconstruction => self.input_dim(),
        }
    }

    /// Mean squared reconstruction error over the rows.
    pub fn reconstruction_mse(&self, x: ArrayView2<T>) -> Result<T> {
        self.network.check_input(x.ncols())?;
        Ok(super::train::dataset_loss(
            &self.network,
            Loss::MeanSquaredError,
            x,
            Targets::Values(x),
        ))
    }
}

fn row<T: Scalar>(x: &[T]) -> Array2<T> {
    Array1::from(x.to_vec()).insert_axis(Axis(0))
}

pub type TrainedAutoencoder<T> = Trained<Autoencoder<T>, T>;

/// Trains the autoencoder to reproduce its input under mean squared error.
pub fn train_autoencoder<T: Scalar>(
    rows: ArrayView2<T>,
    ae: &AeConfig,
    config: &TrainConfig,
) -> Result<TrainedAutoencoder<T>> {
    let mut model = Autoencoder::init(ae, config.seed)?;
    let report = sgd(
        &mut model.network,
        Loss::MeanSquaredError,
        rows,
        Targets::Values(rows),
        config,
    )?;
    Ok(Trained {
        model,
        config: *config,
        report,
    })
}
