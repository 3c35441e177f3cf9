//! Glue between the corpus, the tokenizer, the generator, the relation bank
//! and the evaluation protocol.

use std::collections::BTreeMap;

use crate::conditioning::{embed_text, SPEECH_PROMPT};
use crate::config::RunConfig;
use crate::datagen::{Sample, StoredSample};
use crate::error::{Error, Result};
use crate::generator::{
    audio_codes, generate_from_text, masked_token_accuracy, sample_codes, text_only_codes,
    text_only_logits, token_accuracy, AudioExample, GeneratorModel, Sampling, TextExample,
};
use crate::metrics::{
    fid, mm_dist, mmodality, r_precision_batched, EvalReport, FeatureExtractor, PROTOCOL_VERSION,
    R_PRECISION_BATCH,
};
use crate::motion::{MotionSequence, PoseSequence2D};
use crate::token2pose::Template;
use crate::vq::VqModel;

/// One corpus item as seen by the training and evaluation code.
#[derive(Clone, Copy, Debug)]
pub struct Paired<'a> {
    pub id: &'a str,
    pub label: &'a str,
    pub motion: &'a MotionSequence,
    pub poses: Option<&'a PoseSequence2D>,
    pub audio: &'a [f32],
}

impl StoredSample {
    pub fn paired(&self) -> Paired<'_> {
        Paired {
            id: &self.entry.id,
            label: &self.entry.label,
            motion: &self.motion,
            poses: Some(&self.poses),
            audio: &self.audio,
        }
    }
}

impl Sample {
    pub fn paired(&self) -> Paired<'_> {
        Paired {
            id: &self.id,
            label: &self.label,
            motion: &self.motion,
            poses: None,
            audio: &self.audio,
        }
    }
}

fn label_embeddings<'a>(items: &[Paired<'a>]) -> Result<BTreeMap<&'a str, Vec<f32>>> {
    let mut out = BTreeMap::new();
    for it in items {
        if !out.contains_key(it.label) {
            out.insert(it.label, embed_text(it.label)?.vector);
        }
    }
    Ok(out)
}

pub fn text_examples(vq: &VqModel, items: &[Paired]) -> Result<Vec<TextExample>> {
    let motions: Vec<MotionSequence> = items.iter().map(|p| p.motion.clone()).collect();
    let tokens = vq.tokenize_many(&motions)?;
    let emb = label_embeddings(items)?;
    Ok(items
        .iter()
        .zip(tokens)
        .map(|(p, tokens)| TextExample {
            text: emb[p.label].clone(),
            tokens,
        })
        .collect())
}

pub fn audio_examples(vq: &VqModel, items: &[Paired]) -> Result<Vec<AudioExample>> {
    let motions: Vec<MotionSequence> = items.iter().map(|p| p.motion.clone()).collect();
    let tokens = vq.tokenize_many(&motions)?;
    items
        .iter()
        .zip(tokens)
        .map(|(p, tokens)| AudioExample::from_waveform(p.audio, tokens))
        .collect()
}

/// Bank templates from items that carry a 2D pose track.
pub fn bank_templates(items: &[Paired]) -> Result<Vec<Template>> {
    items
        .iter()
        .map(|p| {
            let poses = p
                .poses
                .ok_or_else(|| Error::InvalidInput(format!("item `{}` has no 2D poses", p.id)))?;
            Ok(Template {
                id: p.id.to_string(),
                motion: p.motion.clone(),
                poses: poses.clone(),
            })
        })
        .collect()
}

/// Audio-conditioned accuracy of the fused model and of the text branch alone
/// under the speech prompt, both over fully masked held-out sequences.
pub fn audio_vs_text_only(model: &GeneratorModel, examples: &[AudioExample]) -> Result<(f64, f64)> {
    let truth: Vec<Vec<usize>> = examples.iter().map(|e| e.tokens.clone()).collect();
    let fused = audio_codes(model, examples)?;
    let speech = embed_text(SPEECH_PROMPT)?.vector;
    let t = truth.first().map_or(0, Vec::len);
    let baseline = text_only_codes(model, &vec![speech; examples.len()], t)?;
    Ok((
        token_accuracy(&fused, &truth) as f64,
        token_accuracy(&baseline, &truth) as f64,
    ))
}

/// The full protocol on held-out items: text-to-motion retrieval, FID against
/// real motion, MM-Dist, MModality and masked-token accuracy. `fit` supplies
/// the paired data for the text side of the feature extractor.
pub fn evaluate(
    vq: &VqModel,
    generator: &GeneratorModel,
    run: &RunConfig,
    fit: &[Paired],
    test: &[Paired],
) -> Result<EvalReport> {
    if test.len() < R_PRECISION_BATCH {
        return Err(Error::Protocol(format!(
            "the protocol needs at least {R_PRECISION_BATCH} test items, got {}",
            test.len()
        )));
    }
    let ev = &run.eval;
    let mut extractor = FeatureExtractor::new(ev.feature_dim, ev.extractor_seed);
    let fit_texts = label_embeddings(fit)?;
    let fit_x: Vec<Vec<f32>> = fit.iter().map(|p| fit_texts[p.label].clone()).collect();
    let fit_y: Vec<Vec<f64>> = fit
        .iter()
        .map(|p| extractor.motion_features(p.motion))
        .collect();
    extractor.fit_text_map(&fit_x, &fit_y, ev.ridge)?;

    let emb = label_embeddings(test)?;
    let tokens_per_item = test
        .first()
        .map(|p| p.motion.num_frames() / vq.downsample())
        .ok_or_else(|| Error::InsufficientData("empty test split".into()))?;
    let mut generated: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for &label in emb.keys() {
        let g = generate_from_text(vq, generator, run, label, tokens_per_item, Sampling::Greedy)?;
        generated.insert(label, extractor.motion_features(&g.motion));
    }
    let text_feats: Vec<Vec<f64>> = test
        .iter()
        .map(|p| extractor.text_features(&emb[p.label]))
        .collect::<Result<_>>()?;
    let real: Vec<Vec<f64>> = test
        .iter()
        .map(|p| extractor.motion_features(p.motion))
        .collect();
    let gen: Vec<Vec<f64>> = test.iter().map(|p| generated[p.label].clone()).collect();

    let mut per_prompt = Vec::with_capacity(emb.len());
    for (i, &label) in emb.keys().enumerate() {
        let logits = text_only_logits(generator, label, tokens_per_item)?;
        let mut feats = Vec::with_capacity(ev.mmodality_samples);
        for s in 0..ev.mmodality_samples {
            let seed = crate::rng::fnv1a64(format!("{}/{i}/{s}", run.seed).as_bytes());
            let ids = sample_codes(
                &logits,
                Sampling::Categorical {
                    temperature: ev.temperature,
                    seed,
                },
            )?;
            feats.push(extractor.motion_features(&vq.decode_tokens(&ids, run.data.fps)?));
        }
        per_prompt.push(feats);
    }

    let masked = text_examples(vq, test)?;
    Ok(EvalReport {
        protocol: PROTOCOL_VERSION.into(),
        seed: run.seed,
        extractor_seed: ev.extractor_seed,
        r_precision: r_precision_batched(&gen, &text_feats, run.seed)?,
        r_precision_real: r_precision_batched(&real, &text_feats, run.seed)?,
        fid: fid(&real, &gen)?,
        mm_dist: mm_dist(&gen, &text_feats)?,
        mm_dist_real: mm_dist(&real, &text_feats)?,
        mmodality: mmodality(&per_prompt, ev.mmodality_pairs, run.seed)?,
        masked_token_accuracy: Some(
            masked_token_accuracy(generator, &masked, 0.5, run.seed)? as f64
        ),
        num_real: real.len(),
        num_generated: gen.len(),
        num_prompts: emb.len(),
    })
}
