//! Feed-forward classifier and autoencoder trained with mini-batch SGD.
//!
//! Each layer computes `act(W a + b)` on the previous layer's output. The
//! classifier uses ReLU hidden layers and a softmax output trained with
//! cross-entropy; the autoencoder uses ReLU hidden layers, a sigmoid latent
//! code and a linear reconstruction trained with mean squared error.

mod autoencoder;
mod classifier;
mod gradcheck;
pub mod io;
mod network;
mod train;

pub use autoencoder::{train_autoencoder, AeConfig, AeFeed, Autoencoder, TrainedAutoencoder};
pub use classifier::{
    argmax, predict, train_classifier, Classifier, MlpConfig, Prediction, Trained, TrainedClassifier,
};
pub use gradcheck::{gradient_check, gradient_check_with_step, numerical_gradient, FD_STEP};
pub use network::{loss_gradients, sigmoid, softmax_rows, Activation, Gradients, LayerParams, Loss, Network, Targets};
pub use train::{dataset_loss, sgd, TrainConfig, TrainReport};
