use rand::Rng;

use super::model::{
    audio_branch, audio_branch_loss, mask_tokens, sample_codes, text_branch, text_branch_loss,
    text_logits, GeneratorModel, MaskedTokens, Sampling,
};
use crate::conditioning::{embed_text, extract_audio_features, SAMPLE_RATE, SPEECH_PROMPT};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::{adam_step, clip_global_norm, AdamState, Tape, Tensor};
use crate::rng::stream_rng;

/// Prompt embedding paired with a token sequence.
#[derive(Clone, Debug)]
pub struct TextExample {
    pub text: Vec<f32>,
    pub tokens: Vec<usize>,
}

/// Log-mel frames `[F, mel]` paired with a token sequence.
#[derive(Clone, Debug)]
pub struct AudioExample {
    pub mel: Tensor,
    pub tokens: Vec<usize>,
}

impl AudioExample {
    pub fn from_waveform(samples: &[f32], tokens: Vec<usize>) -> Result<Self> {
        Ok(Self {
            mel: extract_audio_features(samples, SAMPLE_RATE)?.0,
            tokens,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageLog {
    pub step: usize,
    pub loss: f32,
    pub mask_ratio: f32,
}

impl StageLog {
    pub const CSV_HEADER: &'static str = "step,loss,mask_ratio";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.step, self.loss, self.mask_ratio)
    }
}

fn check_uniform_length(lens: impl Iterator<Item = usize>) -> Result<usize> {
    let mut lens = lens.peekable();
    let first = *lens
        .peek()
        .ok_or_else(|| Error::InsufficientData("no training examples".into()))?;
    if first == 0 || lens.any(|l| l != first) {
        return Err(Error::InvalidInput(
            "training examples must share one non-zero token length".into(),
        ));
    }
    Ok(first)
}

fn finish_step(
    model: &mut GeneratorModel,
    grads: std::collections::BTreeMap<String, Tensor>,
    adam: &mut AdamState,
    clip: f32,
) -> Result<()> {
    let mut grads = grads;
    clip_global_norm(&mut grads, clip);
    adam_step(&mut model.params, &grads, adam)
}

/// Masked-token training of the text branch alone.
pub fn train_text_stage(
    model: &mut GeneratorModel,
    data: &[TextExample],
    run: &RunConfig,
    mut on_step: impl FnMut(&StageLog),
) -> Result<(AdamState, Vec<StageLog>)> {
    let cfg = run.generator.clone();
    let t = check_uniform_length(data.iter().map(|e| e.tokens.len()))?;
    let mut rng = stream_rng(run.seed, "gen.text.train");
    let mut adam = AdamState::new(cfg.adam);
    let mut log = Vec::with_capacity(cfg.text_steps);
    model.freeze_text_branch(false);
    model.freeze_audio_branch(true);
    for step in 0..cfg.text_steps {
        let ratio = rng.random_range(cfg.mask_ratio[0]..=cfg.mask_ratio[1]);
        let mut text = Vec::with_capacity(cfg.batch_size * cfg.text_dim);
        let mut ids = Vec::with_capacity(cfg.batch_size * t);
        let mut targets = Vec::with_capacity(cfg.batch_size * t);
        let mut flags = Vec::with_capacity(cfg.batch_size * t);
        for _ in 0..cfg.batch_size {
            let ex = &data[rng.random_range(0..data.len())];
            let m = mask_tokens(&ex.tokens, ratio, model.mask_id(), &mut rng)?;
            text.extend_from_slice(&ex.text);
            ids.extend(m.ids);
            flags.extend(m.flags);
            targets.extend_from_slice(&ex.tokens);
        }
        let text = Tensor::new(&[cfg.batch_size, cfg.text_dim], text)?;
        let (loss, grads) = {
            let mut tape = Tape::new();
            let branch = text_branch(&mut tape, &model.params, &cfg, &text, &ids)?;
            let logits = text_logits(&mut tape, &model.params, &branch)?;
            let loss = text_branch_loss(&mut tape, logits, &targets, &flags)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence(format!(
                    "text-stage loss is {lv} at step {step}"
                )));
            }
            (lv, tape.backward(loss)?.into_param_grads(&model.params))
        };
        finish_step(model, grads, &mut adam, cfg.grad_clip)?;
        let entry = StageLog {
            step,
            loss,
            mask_ratio: ratio,
        };
        on_step(&entry);
        log.push(entry);
    }
    model.freeze_audio_branch(false);
    Ok((adam, log))
}

/// Per-layer text-branch outputs for the speech prompt over fully masked
/// tokens. They do not depend on the audio, so one copy serves every item.
fn speech_prompt_context(model: &GeneratorModel, t: usize) -> Result<Vec<Tensor>> {
    let cfg = &model.config;
    let text = Tensor::new(&[1, cfg.text_dim], embed_text(SPEECH_PROMPT)?.vector)?;
    let masked = MaskedTokens::all_masked(t, model.mask_id());
    let mut tape = Tape::new();
    let branch = text_branch(&mut tape, &model.params, cfg, &text, &masked.ids)?;
    Ok(branch
        .layers
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect())
}

fn repeat_batch(t: &Tensor, b: usize) -> Result<Tensor> {
    let mut shape = t.shape().to_vec();
    shape[0] *= b;
    Tensor::new(&shape, t.data().repeat(b))
}

/// Audio-branch training with the text branch frozen and fed the speech prompt
/// over a fully masked token sequence.
pub fn train_audio_stage(
    model: &mut GeneratorModel,
    data: &[AudioExample],
    run: &RunConfig,
    mut on_step: impl FnMut(&StageLog),
) -> Result<(AdamState, Vec<StageLog>)> {
    let cfg = run.generator.clone();
    let t = check_uniform_length(data.iter().map(|e| e.tokens.len()))?;
    check_uniform_length(data.iter().map(|e| e.mel.rows()))?;
    let frames = data[0].mel.rows();
    let mut rng = stream_rng(run.seed, "gen.audio.train");
    let mut adam = AdamState::new(cfg.adam);
    let mut log = Vec::with_capacity(cfg.audio_steps);
    model.freeze_text_branch(true);
    let context: Vec<Tensor> = speech_prompt_context(model, t)?
        .iter()
        .map(|c| repeat_batch(c, cfg.batch_size))
        .collect::<Result<_>>()?;
    for step in 0..cfg.audio_steps {
        let mut mel = Vec::with_capacity(cfg.batch_size * frames * cfg.mel_bins);
        let mut targets = Vec::with_capacity(cfg.batch_size * t);
        for _ in 0..cfg.batch_size {
            let ex = &data[rng.random_range(0..data.len())];
            mel.extend_from_slice(ex.mel.data());
            targets.extend_from_slice(&ex.tokens);
        }
        let mel = Tensor::new(&[cfg.batch_size, frames, cfg.mel_bins], mel)?;
        let (loss, grads) = {
            let mut tape = Tape::new();
            let fusion: Vec<_> = context.iter().map(|c| tape.constant(c.clone())).collect();
            let mel = tape.constant(mel);
            let logits = audio_branch(&mut tape, &model.params, &cfg, mel, t, Some(&fusion))?;
            let loss = audio_branch_loss(&mut tape, logits, &targets)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence(format!(
                    "audio-stage loss is {lv} at step {step}"
                )));
            }
            (lv, tape.backward(loss)?.into_param_grads(&model.params))
        };
        finish_step(model, grads, &mut adam, cfg.grad_clip)?;
        let entry = StageLog {
            step,
            loss,
            mask_ratio: 1.0,
        };
        on_step(&entry);
        log.push(entry);
    }
    model.freeze_text_branch(false);
    Ok((adam, log))
}

const EVAL_BATCH: usize = 32;

/// Top-1 accuracy of the text branch at masked positions, masking each
/// example at `ratio` with a seeded generator.
pub fn masked_token_accuracy(
    model: &GeneratorModel,
    data: &[TextExample],
    ratio: f32,
    seed: u64,
) -> Result<f32> {
    let cfg = &model.config;
    let mut rng = stream_rng(seed, "gen.eval.mask");
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in data.chunks(EVAL_BATCH) {
        let t = check_uniform_length(chunk.iter().map(|e| e.tokens.len()))?;
        let mut text = Vec::new();
        let mut ids = Vec::new();
        let mut flags = Vec::new();
        let mut targets = Vec::new();
        for ex in chunk {
            let m = mask_tokens(&ex.tokens, ratio, model.mask_id(), &mut rng)?;
            text.extend_from_slice(&ex.text);
            ids.extend(m.ids);
            flags.extend(m.flags);
            targets.extend_from_slice(&ex.tokens);
        }
        let text = Tensor::new(&[chunk.len(), cfg.text_dim], text)?;
        let mut tape = Tape::new();
        let branch = text_branch(&mut tape, &model.params, cfg, &text, &ids)?;
        let logits = text_logits(&mut tape, &model.params, &branch)?;
        let pred = sample_codes(tape.value(logits), Sampling::Greedy)?;
        debug_assert_eq!(pred.len(), chunk.len() * t);
        for ((p, g), f) in pred.iter().zip(&targets).zip(&flags) {
            if *f == 0 {
                total += 1;
                hit += usize::from(p == g);
            }
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMean("no masked positions to score".into()));
    }
    Ok(hit as f32 / total as f32)
}

/// Greedy text-branch codes for each prompt over a fully masked sequence of `t` tokens.
pub fn text_only_codes(
    model: &GeneratorModel,
    prompts: &[Vec<f32>],
    t: usize,
) -> Result<Vec<Vec<usize>>> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(EVAL_BATCH) {
        let text = Tensor::new(&[chunk.len(), cfg.text_dim], chunk.concat())?;
        let ids = vec![model.mask_id(); chunk.len() * t];
        let mut tape = Tape::new();
        let branch = text_branch(&mut tape, &model.params, cfg, &text, &ids)?;
        let logits = text_logits(&mut tape, &model.params, &branch)?;
        let pred = sample_codes(tape.value(logits), Sampling::Greedy)?;
        out.extend(pred.chunks(t).map(<[usize]>::to_vec));
    }
    Ok(out)
}

/// Greedy fused-model codes under the speech prompt for each audio example.
pub fn audio_codes(model: &GeneratorModel, data: &[AudioExample]) -> Result<Vec<Vec<usize>>> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let t = check_uniform_length(chunk.iter().map(|e| e.tokens.len()))?;
        let frames = check_uniform_length(chunk.iter().map(|e| e.mel.rows()))?;
        let context: Vec<Tensor> = speech_prompt_context(model, t)?
            .iter()
            .map(|c| repeat_batch(c, chunk.len()))
            .collect::<Result<_>>()?;
        let mel: Vec<f32> = chunk
            .iter()
            .flat_map(|e| e.mel.data().iter().copied())
            .collect();
        let mut tape = Tape::new();
        let fusion: Vec<_> = context.into_iter().map(|c| tape.constant(c)).collect();
        let mel = tape.constant(Tensor::new(&[chunk.len(), frames, cfg.mel_bins], mel)?);
        let logits = audio_branch(&mut tape, &model.params, cfg, mel, t, Some(&fusion))?;
        let pred = sample_codes(tape.value(logits), Sampling::Greedy)?;
        out.extend(pred.chunks(t).map(<[usize]>::to_vec));
    }
    Ok(out)
}

/// Fraction of positions where `pred` matches `truth`.
pub fn token_accuracy(pred: &[Vec<usize>], truth: &[Vec<usize>]) -> f32 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(truth) {
        for (a, b) in p.iter().zip(g) {
            total += 1;
            hit += usize::from(a == b);
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f32 / total as f32
    }
}
