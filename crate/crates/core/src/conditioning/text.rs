use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::fnv1a64;

pub const TEXT_DIM: usize = 512;
/// Prompt paired with every audio-stage training example.
pub const SPEECH_PROMPT: &str = "A person is giving a speech.";

/// Unit-norm prompt embedding, with the prompt kept alongside.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub text: String,
    pub vector: Vec<f32>,
}

fn word_vector(word: &str) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(word.as_bytes()));
    (0..TEXT_DIM)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

/// Lowercase, split on non-alphanumerics, average one pseudo-random vector per
/// word (seeded by the word's hash), then L2-normalize.
pub fn embed_text(s: &str) -> Result<TextEmbedding> {
    let lower = s.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return Err(Error::InvalidInput(format!("prompt {s:?} has no words")));
    }
    let mut acc = vec![0.0f64; TEXT_DIM];
    for w in &words {
        for (a, v) in acc.iter_mut().zip(word_vector(w)) {
            *a += v;
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Degenerate(format!("prompt {s:?} embeds to zero")));
    }
    Ok(TextEmbedding {
        text: s.to_string(),
        vector: acc.iter().map(|v| (v / norm) as f32).collect(),
    })
}
