//! Deterministic audio and text frontends: log-mel features with a trainable
//! temporal block, and a hashed bag-of-words text embedding.

mod audio;
mod temporal;
mod text;

pub use audio::{
    extract_audio_features, mel_filterbank, read_wav, write_wav, MelFeatures, FRAME_HOP, FRAME_LEN,
    LOG_FLOOR, MEL_BINS, N_FFT, SAMPLE_RATE,
};
pub use temporal::{init_temporal_block, temporal_block, TEMPORAL_CHANNELS};
pub use text::{embed_text, TextEmbedding, SPEECH_PROMPT, TEXT_DIM};
