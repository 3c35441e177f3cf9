//! Dual-branch motion-token generator: audio branch, plug-in text branch,
//! per-layer additive fusion, masked-token and audio objectives, and sampling.

mod generate;
mod model;
mod train;

pub use generate::{
    check_compatible, generate_from_text, generate_motion, text_only_logits, token_windows,
    Generated, GenerationManifest,
};
pub use model::{
    audio_branch, audio_branch_loss, forward_fused, mask_tokens, sample_codes, text_branch,
    text_branch_loss, text_logits, GeneratorModel, LoadedGenerator, MaskedTokens, Sampling, Stage,
    TextBranch, CHECKPOINT_KIND, TEXT_PREFIX,
};
pub use train::{
    audio_codes, masked_token_accuracy, text_only_codes, token_accuracy, train_audio_stage,
    train_text_stage, AudioExample, StageLog, TextExample,
};
