//! Synthetic shapes data, the conditional noise predictor and its training loop.

mod checkpoint;
pub mod dataset;
mod model;
mod oracle;
mod prompt;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dataset::{classify, generate_dataset, image_to_latent, latent_to_image, Sample};
pub use model::{timestep_features, DenoiserModel, ModelConfig, ATTENTION_LAYERS};
pub use oracle::OracleDenoiser;
pub use prompt::{Color, Prompt, Shape, NULL_TOKEN, PAD_TOKEN, PROMPT_LEN, VOCAB, VOCAB_SIZE};
pub use train::{loss_and_grads, train, Adam, Batch, TrainConfig};
