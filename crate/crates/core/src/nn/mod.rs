//! Residual convolutional distinguisher: tensors, layers, reverse-mode
//! gradients, training and model files.

pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use io::{load_model, save_model};
pub use model::{bce_loss, reshape_input, Mode, ModelConfig, ModelParams, Network};
pub use tensor::{Real, Tensor};
pub use train::{cyclic_lr, evaluate, train, Evaluation, TrainConfig, TrainedModel};
