//! Patch encoders, triplet loss and training.

mod gradcheck;
mod io;
mod loss;
mod model;
mod oracle;
mod train;

pub use gradcheck::{gradcheck, gradcheck_config, GradcheckReport};
pub use io::{encoder_paths, read_encoder, write_encoder, EncoderHeader, LayerEntry};
pub use loss::{
    evaluate_triplet, loss_gradients, softplus, triplet_loss, triplet_loss_embedding_grads,
    TripletGradients, TripletLossConfig,
};
pub use model::{conv_out, EncoderConfig, EncoderModel, ForwardCache, Gradients, KERNEL};
pub use oracle::{oracle_embed, oracle_embed_point};
pub use train::{train, TrainConfig, TrainOutcome, TripletSource};
