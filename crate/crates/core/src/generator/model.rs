use std::path::Path;

use rand::Rng;
use serde_json::json;

use crate::conditioning::{init_temporal_block, temporal_block};
use crate::config::{GeneratorConfig, RunConfig};
use crate::error::{Error, Result};
use crate::numerics::layers::{
    init_layer_norm, init_linear, init_transformer_block, layer_norm, linear, sinusoidal_positions,
    transformer_block,
};
use crate::numerics::{Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::vq::checkpoint_config;

pub const CHECKPOINT_KIND: &str = "generator";
/// Parameter prefix of the plug-in text branch.
pub const TEXT_PREFIX: &str = "gen.text.";
const AUDIO_PREFIX: &str = "gen.audio.";

/// Which training stages a generator checkpoint has been through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Text,
    Audio,
}

/// Token ids with a reserved mask id, and per-position flags
/// (0 where the position is masked, 1 where it carries its original token).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedTokens {
    pub ids: Vec<usize>,
    pub flags: Vec<u8>,
}

impl MaskedTokens {
    /// Every position masked.
    pub fn all_masked(len: usize, mask_id: usize) -> Self {
        Self {
            ids: vec![mask_id; len],
            flags: vec![0; len],
        }
    }

    pub fn num_masked(&self) -> usize {
        self.flags.iter().filter(|&&f| f == 0).count()
    }
}

/// Replace each position by `mask_id` with probability `ratio`, independently.
/// A draw that masks nothing is repeated.
pub fn mask_tokens<R: Rng + ?Sized>(
    tokens: &[usize],
    ratio: f32,
    mask_id: usize,
    rng: &mut R,
) -> Result<MaskedTokens> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput(
            "cannot mask an empty token sequence".into(),
        ));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "mask ratio {ratio} outside (0, 1]"
        )));
    }
    loop {
        let flags: Vec<u8> = tokens
            .iter()
            .map(|_| u8::from(rng.random::<f32>() >= ratio))
            .collect();
        if flags.contains(&0) {
            let ids = tokens
                .iter()
                .zip(&flags)
                .map(|(&t, &f)| if f == 0 { mask_id } else { t })
                .collect();
            return Ok(MaskedTokens { ids, flags });
        }
    }
}

/// Dual-branch token predictor: an audio branch driven by log-mel frames and
/// a text branch driven by a prompt embedding plus (masked) motion tokens.
/// After every transformer layer the text branch's output is added to the
/// audio branch's.
#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub params: ParamStore,
    pub config: GeneratorConfig,
    pub num_codes: usize,
}

impl GeneratorModel {
    pub fn init<R: Rng + ?Sized>(
        cfg: &GeneratorConfig,
        num_codes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !cfg.width.is_multiple_of(cfg.heads) {
            return Err(Error::InvalidInput(format!(
                "width {} is not divisible by {} heads",
                cfg.width, cfg.heads
            )));
        }
        let mut p = ParamStore::new();
        let w = cfg.width;
        init_temporal_block(
            &mut p,
            "gen.audio.temporal",
            cfg.mel_bins,
            cfg.audio_dim,
            rng,
        )?;
        init_linear(&mut p, "gen.audio.in", cfg.audio_dim, w, rng)?;
        init_linear(&mut p, "gen.text.proj", cfg.text_dim, w, rng)?;
        p.insert(
            "gen.text.tok_emb",
            Tensor::randn(&[num_codes + 1, w], 0.02, rng),
        )?;
        for s in 0..cfg.layers {
            init_transformer_block(&mut p, &format!("gen.audio.block{s}"), w, cfg.ff_width, rng)?;
            init_transformer_block(&mut p, &format!("gen.text.block{s}"), w, cfg.ff_width, rng)?;
        }
        for branch in ["audio", "text"] {
            init_layer_norm(&mut p, &format!("gen.{branch}.ln_f"), w)?;
            init_linear(&mut p, &format!("gen.{branch}.head"), w, num_codes, rng)?;
        }
        Ok(Self {
            params: p,
            config: cfg.clone(),
            num_codes,
        })
    }

    pub fn mask_id(&self) -> usize {
        self.num_codes
    }

    /// Stop (or resume) gradient updates of the text branch.
    pub fn freeze_text_branch(&mut self, frozen: bool) {
        self.params.set_trainable_prefix(TEXT_PREFIX, !frozen);
    }

    pub fn freeze_audio_branch(&mut self, frozen: bool) {
        self.params.set_trainable_prefix(AUDIO_PREFIX, !frozen);
    }

    /// Parameters of one branch only.
    pub fn text_params(&self) -> ParamStore {
        self.params.filter_prefix(TEXT_PREFIX)
    }

    pub fn audio_params(&self) -> ParamStore {
        self.params.filter_prefix(AUDIO_PREFIX)
    }

    pub fn to_checkpoint(&self, run: &RunConfig, stage: Stage, tokenizer_hash: &str) -> Checkpoint {
        Checkpoint::new(json!({
            "kind": CHECKPOINT_KIND,
            "stage": stage,
            "num_codes": self.num_codes,
            "tokenizer_hash": tokenizer_hash,
            "config": run,
            "config_hash": run.hash(),
        }))
        .with_params(&self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<LoadedGenerator> {
        let run = checkpoint_config(ck, CHECKPOINT_KIND)?;
        let stage: Stage =
            serde_json::from_value(ck.meta.get("stage").cloned().ok_or_else(|| {
                Error::Compatibility("generator checkpoint has no stage".into())
            })?)?;
        let num_codes = ck
            .meta
            .get("num_codes")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as usize;
        if num_codes != run.vq.codebook_size {
            return Err(Error::Compatibility(format!(
                "generator predicts {num_codes} codes but the tokenizer config has {}",
                run.vq.codebook_size
            )));
        }
        let tokenizer_hash = ck
            .meta
            .get("tokenizer_hash")
            .and_then(|v| v.as_str())
            .unwrap_or("")
            .to_string();
        // Shapes are checked against a freshly initialised model of the same config.
        let mut rng = crate::rng::stream_rng(0, "gen.shape");
        let reference = GeneratorModel::init(&run.generator, num_codes, &mut rng)?;
        let mut params = ParamStore::new();
        for (name, t) in reference.params.iter() {
            let stored = ck.tensors.get(name).ok_or_else(|| {
                Error::Compatibility(format!("generator checkpoint lacks `{name}`"))
            })?;
            if stored.shape() != t.shape() {
                return Err(Error::Compatibility(format!(
                    "`{name}` has shape {:?}, config expects {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            params.insert(name, stored.clone())?;
        }
        Ok(LoadedGenerator {
            model: GeneratorModel {
                params,
                config: run.generator.clone(),
                num_codes,
            },
            run,
            stage,
            tokenizer_hash,
        })
    }

    pub fn load(stem: &Path) -> Result<LoadedGenerator> {
        Self::from_checkpoint(&Checkpoint::load(stem)?)
    }
}

#[derive(Clone, Debug)]
pub struct LoadedGenerator {
    pub model: GeneratorModel,
    pub run: RunConfig,
    pub stage: Stage,
    /// Hash of the tokenizer checkpoint the generator was trained against.
    pub tokenizer_hash: String,
}

/// Per-layer outputs of the text branch at the token positions, plus its head input.
pub struct TextBranch {
    pub layers: Vec<Var>,
    pub last: Var,
}

/// Text branch over `[prompt ; token embeddings]`. `text` is `[B, text_dim]`;
/// `ids` holds `B × T` token ids (mask id allowed).
pub fn text_branch<'s>(
    tape: &mut Tape<'s>,
    store: &'s ParamStore,
    cfg: &GeneratorConfig,
    text: &Tensor,
    ids: &[usize],
) -> Result<TextBranch> {
    let b = text.rows();
    if text.last_dim() != cfg.text_dim || b == 0 || !ids.len().is_multiple_of(b) {
        return Err(Error::shape(
            "text_branch",
            format!("prompt {:?} with {} token ids", text.shape(), ids.len()),
        ));
    }
    let t = ids.len() / b;
    let prompt = tape.constant(text.clone().reshape(&[b, 1, cfg.text_dim])?);
    let prompt = linear(tape, store, "gen.text.proj", prompt)?;
    let table = tape.param(store, "gen.text.tok_emb")?;
    let tok = tape.embedding(table, ids, &[b, t])?;
    let pos = tape.constant(sinusoidal_positions(t, cfg.width));
    let tok = tape.add_broadcast(tok, pos)?;
    let mut h = tape.concat_seq(prompt, tok)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for s in 0..cfg.layers {
        h = transformer_block(tape, store, &format!("gen.text.block{s}"), h, cfg.heads)?;
        layers.push(tape.slice_seq(h, 1, t)?);
    }
    let last = *layers
        .last()
        .ok_or_else(|| Error::InvalidInput("generator has no layers".into()))?;
    Ok(TextBranch { layers, last })
}

/// Text-branch code logits `[B, T, K]`.
pub fn text_logits<'s>(
    tape: &mut Tape<'s>,
    store: &'s ParamStore,
    branch: &TextBranch,
) -> Result<Var> {
    let h = layer_norm(tape, store, "gen.text.ln_f", branch.last)?;
    linear(tape, store, "gen.text.head", h)
}

/// Audio branch over `[B, F, mel]` frames resampled to `t` tokens, returning
/// code logits `[B, t, K]`. With `fusion`, entry `s` is added to the output
/// of layer `s`.
pub fn audio_branch<'s>(
    tape: &mut Tape<'s>,
    store: &'s ParamStore,
    cfg: &GeneratorConfig,
    mel: Var,
    t: usize,
    fusion: Option<&[Var]>,
) -> Result<Var> {
    if let Some(f) = fusion {
        if f.len() != cfg.layers {
            return Err(Error::shape(
                "audio_branch",
                format!("{} fusion inputs for {} layers", f.len(), cfg.layers),
            ));
        }
    }
    let a = temporal_block(tape, store, "gen.audio.temporal", mel, t)?;
    let a = linear(tape, store, "gen.audio.in", a)?;
    let pos = tape.constant(sinusoidal_positions(t, cfg.width));
    let mut h = tape.add_broadcast(a, pos)?;
    for s in 0..cfg.layers {
        h = transformer_block(tape, store, &format!("gen.audio.block{s}"), h, cfg.heads)?;
        if let Some(f) = fusion {
            h = tape.add(h, f[s])?;
        }
    }
    let h = layer_norm(tape, store, "gen.audio.ln_f", h)?;
    linear(tape, store, "gen.audio.head", h)
}

/// Fused logits `[B, T, K]` from mel frames `[B, F, mel]`, prompt embeddings
/// `[B, text_dim]` and `B × T` (possibly masked) token ids.
pub fn forward_fused<'s>(
    tape: &mut Tape<'s>,
    store: &'s ParamStore,
    cfg: &GeneratorConfig,
    mel: Var,
    text: &Tensor,
    ids: &[usize],
) -> Result<Var> {
    let b = tape.value(mel).shape()[0];
    if text.rows() != b || !ids.len().is_multiple_of(b.max(1)) {
        return Err(Error::shape(
            "forward_fused",
            format!(
                "{b} audio items, {} prompts, {} token ids",
                text.rows(),
                ids.len()
            ),
        ));
    }
    let branch = text_branch(tape, store, cfg, text, ids)?;
    audio_branch(tape, store, cfg, mel, ids.len() / b, Some(&branch.layers))
}

/// Mean negative log-likelihood over masked positions (flag 0) only.
pub fn text_branch_loss(
    tape: &mut Tape<'_>,
    logits: Var,
    targets: &[usize],
    flags: &[u8],
) -> Result<Var> {
    if flags.len() != targets.len() {
        return Err(Error::shape(
            "text_branch_loss",
            format!("{} flags for {} targets", flags.len(), targets.len()),
        ));
    }
    if !flags.contains(&0) {
        return Err(Error::UndefinedMean("no masked positions to score".into()));
    }
    let weights: Vec<f32> = flags
        .iter()
        .map(|&f| if f == 0 { 1.0 } else { 0.0 })
        .collect();
    tape.softmax_cross_entropy(logits, targets, &weights)
}

/// Mean negative log-likelihood over every position.
pub fn audio_branch_loss(tape: &mut Tape<'_>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, targets, &vec![1.0; targets.len()])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Categorical { temperature: f32, seed: u64 },
}

/// One code per logit row (`[.., K]`).
pub fn sample_codes(logits: &Tensor, strategy: Sampling) -> Result<Vec<usize>> {
    let k = logits.last_dim();
    if k == 0 || !logits.all_finite() {
        return Err(Error::InvalidInput(
            "logits must be finite with at least one code".into(),
        ));
    }
    let argmax = |row: &[f32]| {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    };
    let rows = logits.data().chunks(k);
    match strategy {
        Sampling::Greedy => Ok(rows.map(argmax).collect()),
        Sampling::Categorical { temperature, seed } => {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "temperature {temperature} must be > 0"
                )));
            }
            let mut rng = crate::rng::stream_rng(seed, "gen.sample");
            Ok(rows
                .map(|row| {
                    let max = row[argmax(row)] as f64;
                    let w: Vec<f64> = row
                        .iter()
                        .map(|&v| ((v as f64 - max) / temperature as f64).exp())
                        .collect();
                    let total: f64 = w.iter().sum();
                    let mut u = rng.random::<f64>() * total;
                    for (i, wi) in w.iter().enumerate() {
                        if u < *wi {
                            return i;
                        }
                        u -= wi;
                    }
                    argmax(row)
                })
                .collect())
        }
    }
}
