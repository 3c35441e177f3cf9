use serde::{Deserialize, Serialize};

use super::model::{
    forward_fused, sample_codes, text_branch, text_logits, GeneratorModel, MaskedTokens, Sampling,
};
use crate::conditioning::{embed_text, extract_audio_features, SAMPLE_RATE, SPEECH_PROMPT};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::motion::{MotionSequence, FEATURE_DIM};
use crate::numerics::{Tape, Tensor};
use crate::vq::VqModel;

/// Tokens and the decoded motion they stand for.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub tokens: Vec<usize>,
    pub motion: MotionSequence,
}

/// Reject a tokenizer/generator pair whose shared settings differ.
pub fn check_compatible(tokenizer: &RunConfig, generator: &RunConfig) -> Result<()> {
    let (a, b) = (&tokenizer.vq, &generator.vq);
    if a != b {
        return Err(Error::Compatibility(format!(
            "tokenizer has K={} d={} l={}, generator was trained for K={} d={} l={}",
            a.codebook_size, a.code_dim, a.downsample, b.codebook_size, b.code_dim, b.downsample
        )));
    }
    if tokenizer.data.fps != generator.data.fps {
        return Err(Error::Compatibility(format!(
            "tokenizer runs at {} fps, generator at {}",
            tokenizer.data.fps, generator.data.fps
        )));
    }
    Ok(())
}

/// Token windows `(start, len)` covering `n` tokens with the given overlap.
pub fn token_windows(n: usize, window: usize, overlap: usize) -> Vec<(usize, usize)> {
    if n <= window {
        return vec![(0, n)];
    }
    let stride = (window - overlap).max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start + window < n {
        out.push((start, window));
        start += stride;
    }
    out.push((n - window, window));
    out
}

fn samples_per_token(run: &RunConfig) -> usize {
    SAMPLE_RATE as usize * run.vq.downsample / run.data.fps as usize
}

fn window_seed(sampling: Sampling, w: usize) -> Sampling {
    match sampling {
        Sampling::Greedy => Sampling::Greedy,
        Sampling::Categorical { temperature, seed } => Sampling::Categorical {
            temperature,
            seed: crate::rng::fnv1a64(format!("{seed}/{w}").as_bytes()),
        },
    }
}

/// Audio (plus optional prompt, default the speech prompt) to tokens and motion.
///
/// A trailing partial token is padded with silence, so the output covers the
/// whole input. Long inputs are cut into token windows with a small overlap;
/// each window is predicted and decoded on its own and overlapping frames are
/// cross-faded linearly in feature space.
pub fn generate_motion(
    vq: &VqModel,
    generator: &GeneratorModel,
    run: &RunConfig,
    audio: &[f32],
    prompt: Option<&str>,
    sampling: Sampling,
) -> Result<Generated> {
    let per_token = samples_per_token(run);
    if audio.is_empty() {
        return Err(Error::InsufficientLength { needed: 1, got: 0 });
    }
    let n = audio.len().div_ceil(per_token);
    let mut padded = audio.to_vec();
    padded.resize(n * per_token, 0.0);
    let audio = padded.as_slice();
    let cfg = &generator.config;
    let text = embed_text(prompt.unwrap_or(SPEECH_PROMPT))?;
    let text = Tensor::new(&[1, cfg.text_dim], text.vector)?;
    let windows = token_windows(n, cfg.window_tokens, cfg.overlap_tokens);
    let l = vq.downsample();
    let fps = run.data.fps;

    let mut tokens = vec![0usize; n];
    let mut frames = vec![0.0f32; n * l * FEATURE_DIM];
    let mut covered_to = 0usize;
    for (w, &(start, len)) in windows.iter().enumerate() {
        let clip = &audio[start * per_token..(start + len) * per_token];
        let mel = extract_audio_features(clip, SAMPLE_RATE)?.0;
        let f = mel.rows();
        let masked = MaskedTokens::all_masked(len, generator.mask_id());
        let ids = {
            let mut tape = Tape::new();
            let mel = tape.constant(mel.reshape(&[1, f, cfg.mel_bins])?);
            let logits = forward_fused(&mut tape, &generator.params, cfg, mel, &text, &masked.ids)?;
            sample_codes(tape.value(logits), window_seed(sampling, w))?
        };
        let decoded = vq.decode_tokens(&ids, fps)?;

        let overlap = covered_to.saturating_sub(start);
        for (i, &id) in ids.iter().enumerate() {
            if i >= overlap / 2 {
                tokens[start + i] = id;
            }
        }
        let fade = overlap * l;
        for fi in 0..len * l {
            let dst = &mut frames[((start * l) + fi) * FEATURE_DIM..][..FEATURE_DIM];
            let src = decoded.frame(fi);
            if fi < fade {
                let a = (fi + 1) as f32 / (fade + 1) as f32;
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *d * (1.0 - a) + s * a;
                }
            } else {
                dst.copy_from_slice(src);
            }
        }
        covered_to = start + len;
    }
    Ok(Generated {
        tokens,
        motion: MotionSequence::new(frames, fps)?,
    })
}

/// Prompt to tokens and motion through the text branch alone, predicting all
/// `num_tokens` positions from a fully masked sequence.
pub fn generate_from_text(
    vq: &VqModel,
    generator: &GeneratorModel,
    run: &RunConfig,
    prompt: &str,
    num_tokens: usize,
    sampling: Sampling,
) -> Result<Generated> {
    if num_tokens == 0 {
        return Err(Error::InvalidInput("need at least one token".into()));
    }
    let tokens = sample_codes(&text_only_logits(generator, prompt, num_tokens)?, sampling)?;
    let motion = vq.decode_tokens(&tokens, run.data.fps)?;
    Ok(Generated { tokens, motion })
}

/// Text-branch logits `[1, num_tokens, K]` for a prompt over a fully masked sequence.
pub fn text_only_logits(
    generator: &GeneratorModel,
    prompt: &str,
    num_tokens: usize,
) -> Result<Tensor> {
    let cfg = &generator.config;
    let text = Tensor::new(&[1, cfg.text_dim], embed_text(prompt)?.vector)?;
    let ids = vec![generator.mask_id(); num_tokens];
    let mut tape = Tape::new();
    let branch = text_branch(&mut tape, &generator.params, cfg, &text, &ids)?;
    let logits = text_logits(&mut tape, &generator.params, &branch)?;
    Ok(tape.value(logits).clone())
}

/// Record of one `generate` call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub audio: String,
    pub prompt: String,
    pub seed: u64,
    pub sampling: String,
    pub tokenizer_hash: String,
    pub generator_hash: String,
    pub config_hash: String,
    pub tokens: String,
    pub motion: String,
    pub poses: Option<String>,
    pub num_tokens: usize,
    pub num_frames: usize,
}
