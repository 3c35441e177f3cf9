//! Motion tokenizer: convolutional encoder, nearest-code quantization with
//! moving-average codebook updates, and a mirrored decoder.

mod codebook;
mod model;
mod tokens;
mod train;

pub use codebook::{Codebook, QuantizedSequence};
pub use model::{
    checkpoint_config, decoder_graph, encoder_graph, init_autoencoder, vq_loss, LatentSequence,
    VqModel, CHECKPOINT_KIND,
};
pub use tokens::{read_tokens, tokens_from_text, tokens_to_text, write_tokens};
pub use train::{codebook_utilization, train_vqvae, windowed_medians, VqStepLog, VqTrainOutput};
