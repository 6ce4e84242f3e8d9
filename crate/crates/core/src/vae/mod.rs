//! Speaker-profile VAE: encoder, conditional decoder, losses and training.

mod checkpoint;
mod loss;
mod model;
mod train;

pub use checkpoint::{Checkpoint, NamedArray, RngState, CHECKPOINT_FORMAT_VERSION};
pub use loss::{
    kl_grad, kl_to_standard_normal, reconstruction_l1, reparameterize, triplet_loss, triplet_loss_grad, TripletConfig,
};
pub use model::{DecoderCache, EncoderCache, ModelDims, ModelParams};
pub use train::{
    corpus_frames, loss_and_grads, total_loss, train_step, LossBreakdown, LossWeights, SystemVariant, TrainConfig,
    TrainExample, Trainer,
};
