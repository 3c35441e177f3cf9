//! Evaluation: a seeded feature extractor, R-precision, FID, MM-Dist,
//! MModality, and token-histogram divergence.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{MotionSequence, FEATURE_DIM};
use crate::rng::stream_rng;

pub const PROTOCOL_VERSION: &str = "versa-eval-1";
/// Batch size of the retrieval protocol.
pub const R_PRECISION_BATCH: usize = 32;
const COV_REG: f64 = 1e-6;

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

/// Temporal mean then standard deviation of every channel.
pub fn motion_statistics(m: &MotionSequence) -> Vec<f64> {
    let t = m.num_frames().max(1) as f64;
    let mut mean = vec![0.0; FEATURE_DIM];
    for f in 0..m.num_frames() {
        for (a, &v) in mean.iter_mut().zip(m.frame(f)) {
            *a += v as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= t);
    let mut var = vec![0.0; FEATURE_DIM];
    for f in 0..m.num_frames() {
        for ((a, &v), mu) in var.iter_mut().zip(m.frame(f)).zip(&mean) {
            *a += (v as f64 - mu).powi(2);
        }
    }
    mean.extend(var.iter().map(|v| (v / t).sqrt()));
    mean
}

/// Fixed random projection of motion statistics, plus a text map fitted by
/// ridge regression onto the motion features of paired data.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    dim: usize,
    /// `[2·FEATURE_DIM, dim]`, row-major.
    motion_proj: Vec<f64>,
    /// `[text_dim, dim]`, row-major.
    text_map: Option<(usize, Vec<f64>)>,
}

impl FeatureExtractor {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "metrics.motion_projection");
        let rows = 2 * FEATURE_DIM;
        let scale = 1.0 / (rows as f64).sqrt();
        let motion_proj = (0..rows * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Self {
            dim,
            motion_proj,
            text_map: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unit-norm motion feature.
    pub fn motion_features(&self, m: &MotionSequence) -> Vec<f64> {
        let stats = motion_statistics(m);
        let mut out = vec![0.0; self.dim];
        for (i, s) in stats.iter().enumerate() {
            for (o, p) in out
                .iter_mut()
                .zip(&self.motion_proj[i * self.dim..(i + 1) * self.dim])
            {
                *o += s * p;
            }
        }
        l2_normalize(&mut out);
        out
    }

    /// Fit `W = (XᵀX + λI)⁻¹ XᵀY` from text embeddings `X` to motion features `Y`.
    pub fn fit_text_map(
        &mut self,
        texts: &[Vec<f32>],
        motion_feats: &[Vec<f64>],
        ridge: f64,
    ) -> Result<()> {
        if texts.is_empty() || texts.len() != motion_feats.len() {
            return Err(Error::InsufficientData(format!(
                "{} texts for {} motion features",
                texts.len(),
                motion_feats.len()
            )));
        }
        let d_in = texts[0].len();
        let x = DMatrix::from_fn(texts.len(), d_in, |r, c| texts[r][c] as f64);
        let y = DMatrix::from_fn(texts.len(), self.dim, |r, c| motion_feats[r][c]);
        let gram = x.transpose() * &x + DMatrix::identity(d_in, d_in) * ridge;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Degenerate("text Gram matrix is not positive definite".into()))?;
        let w = chol.solve(&(x.transpose() * y));
        let mut flat = Vec::with_capacity(d_in * self.dim);
        for r in 0..d_in {
            for c in 0..self.dim {
                flat.push(w[(r, c)]);
            }
        }
        self.text_map = Some((d_in, flat));
        Ok(())
    }

    /// Unit-norm text feature; needs [`Self::fit_text_map`] first.
    pub fn text_features(&self, text: &[f32]) -> Result<Vec<f64>> {
        let (d_in, w) = self
            .text_map
            .as_ref()
            .ok_or_else(|| Error::Consistency("text map has not been fitted".into()))?;
        if text.len() != *d_in {
            return Err(Error::InvalidInput(format!(
                "text embedding of width {}, expected {d_in}",
                text.len()
            )));
        }
        let mut out = vec![0.0; self.dim];
        for (i, &t) in text.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(&w[i * self.dim..(i + 1) * self.dim]) {
                *o += t as f64 * p;
            }
        }
        l2_normalize(&mut out);
        Ok(out)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Top-1/2/3 retrieval rates for one batch of 32 matched pairs. Each motion
/// ranks all texts by Euclidean distance (stable on ties).
pub fn r_precision(motions: &[Vec<f64>], texts: &[Vec<f64>]) -> Result<[f64; 3]> {
    if motions.len() != R_PRECISION_BATCH || texts.len() != R_PRECISION_BATCH {
        return Err(Error::Protocol(format!(
            "R-precision needs batches of exactly {R_PRECISION_BATCH} pairs, got {} motions and {} texts",
            motions.len(),
            texts.len()
        )));
    }
    let mut hits = [0usize; 3];
    for (i, m) in motions.iter().enumerate() {
        let d: Vec<f64> = texts.iter().map(|t| dist(m, t)).collect();
        let mut order: Vec<usize> = (0..texts.len()).collect();
        order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
        let rank = order.iter().position(|&j| j == i).expect("index present");
        for (k, h) in hits.iter_mut().enumerate() {
            if rank <= k {
                *h += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / R_PRECISION_BATCH as f64))
}

/// R-precision averaged over seeded batches of 32; a trailing partial batch is dropped.
pub fn r_precision_batched(
    motions: &[Vec<f64>],
    texts: &[Vec<f64>],
    seed: u64,
) -> Result<[f64; 3]> {
    if motions.len() != texts.len() || motions.len() < R_PRECISION_BATCH {
        return Err(Error::Protocol(format!(
            "need at least {R_PRECISION_BATCH} matched pairs, got {} motions and {} texts",
            motions.len(),
            texts.len()
        )));
    }
    let mut order: Vec<usize> = (0..motions.len()).collect();
    order.shuffle(&mut stream_rng(seed, "metrics.r_precision"));
    let mut acc = [0.0; 3];
    let mut batches = 0;
    for chunk in order.chunks_exact(R_PRECISION_BATCH) {
        let m: Vec<Vec<f64>> = chunk.iter().map(|&i| motions[i].clone()).collect();
        let t: Vec<Vec<f64>> = chunk.iter().map(|&i| texts[i].clone()).collect();
        let r = r_precision(&m, &t)?;
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
        batches += 1;
    }
    Ok(acc.map(|a| a / batches as f64))
}

fn mean_cov(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if set.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "FID needs at least 2 samples per set, got {}",
            set.len()
        )));
    }
    let d = set[0].len();
    if set.iter().any(|v| v.len() != d) {
        return Err(Error::InvalidInput("features of unequal width".into()));
    }
    let n = set.len() as f64;
    let mu = DVector::from_fn(d, |i, _| set.iter().map(|v| v[i]).sum::<f64>() / n);
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_fn(d, |i, _| v[i] - mu[i]);
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    cov += DMatrix::identity(d, d) * COV_REG;
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// `tr((Σ_A Σ_B)^½)` is taken as `tr((Σ_A^½ Σ_B Σ_A^½)^½)`, both roots by
/// symmetric eigendecomposition with negative eigenvalues clamped to zero.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = mean_cov(a)?;
    let (mu_b, cov_b) = mean_cov(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::InvalidInput("feature sets of unequal width".into()));
    }
    let root_a = psd_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    Ok((mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross)
}

/// Mean Euclidean distance between paired text and motion features.
pub fn mm_dist(motions: &[Vec<f64>], texts: &[Vec<f64>]) -> Result<f64> {
    if motions.is_empty() || motions.len() != texts.len() {
        return Err(Error::InvalidInput(format!(
            "{} motions for {} texts",
            motions.len(),
            texts.len()
        )));
    }
    Ok(motions
        .iter()
        .zip(texts)
        .map(|(m, t)| dist(m, t))
        .sum::<f64>()
        / motions.len() as f64)
}

/// Diversity for one prompt: shuffle the generations with a seeded generator,
/// pair the first `2·pairs` into disjoint pairs and average their distances.
pub fn mmodality_single(features: &[Vec<f64>], pairs: usize, seed: u64) -> Result<f64> {
    if pairs == 0 || features.len() < 2 * pairs {
        return Err(Error::InsufficientData(format!(
            "{} generations cannot form {pairs} disjoint pairs",
            features.len()
        )));
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut stream_rng(seed, "metrics.mmodality"));
    Ok(order[..2 * pairs]
        .chunks_exact(2)
        .map(|p| dist(&features[p[0]], &features[p[1]]))
        .sum::<f64>()
        / pairs as f64)
}

/// Mean of [`mmodality_single`] over prompts (prompt `i` uses seed `seed + i`).
pub fn mmodality(per_prompt: &[Vec<Vec<f64>>], pairs: usize, seed: u64) -> Result<f64> {
    if per_prompt.is_empty() {
        return Err(Error::InsufficientData("no prompts".into()));
    }
    let mut total = 0.0;
    for (i, f) in per_prompt.iter().enumerate() {
        total += mmodality_single(f, pairs, seed.wrapping_add(i as u64))?;
    }
    Ok(total / per_prompt.len() as f64)
}

/// Normalized histogram of token ids over `k` codes.
pub fn token_histogram(ids: &[usize], k: usize) -> Vec<f64> {
    let mut h = vec![0.0; k];
    for &i in ids {
        if i < k {
            h[i] += 1.0;
        }
    }
    let n: f64 = h.iter().sum();
    if n > 0.0 {
        h.iter_mut().for_each(|v| *v /= n);
    }
    h
}

/// Jensen–Shannon divergence in nats (bounded by ln 2).
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub seed: u64,
    pub extractor_seed: u64,
    pub r_precision: [f64; 3],
    pub r_precision_real: [f64; 3],
    pub fid: f64,
    pub mm_dist: f64,
    pub mm_dist_real: f64,
    pub mmodality: f64,
    pub masked_token_accuracy: Option<f64>,
    pub num_real: usize,
    pub num_generated: usize,
    pub num_prompts: usize,
}
