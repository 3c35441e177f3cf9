use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Count given to a code right after it is reset onto a batch latent.
const RESET_COUNT: f32 = 1.0;

/// Discrete codes plus the moving averages that update them.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    codes: Tensor,
    ema_count: Vec<f32>,
    ema_sum: Tensor,
    pub decay: f32,
    pub reset_threshold: f32,
}

/// Nearest-code assignment of a latent sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedSequence {
    pub indices: Vec<usize>,
    /// `[N, d]`, row `i` equal to code `indices[i]`.
    pub vectors: Tensor,
}

impl Codebook {
    pub fn new(codes: Tensor, decay: f32, reset_threshold: f32) -> Result<Self> {
        if codes.shape().len() != 2 || codes.is_empty() {
            return Err(Error::InvalidInput(format!(
                "codebook must be a non-empty [K, d] tensor, got {:?}",
                codes.shape()
            )));
        }
        if !codes.all_finite() {
            return Err(Error::InvalidInput(
                "codebook has non-finite entries".into(),
            ));
        }
        let k = codes.shape()[0];
        Ok(Self {
            ema_sum: Tensor::zeros(codes.shape()),
            ema_count: vec![0.0; k],
            codes,
            decay,
            reset_threshold,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        size: usize,
        dim: usize,
        decay: f32,
        reset_threshold: f32,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            Tensor::randn(&[size, dim], 1.0 / (dim as f32).sqrt(), rng),
            decay,
            reset_threshold,
        )
    }

    /// Rebuild from stored state.
    pub fn from_parts(
        codes: Tensor,
        ema_count: Vec<f32>,
        ema_sum: Tensor,
        decay: f32,
        reset_threshold: f32,
    ) -> Result<Self> {
        let mut cb = Self::new(codes, decay, reset_threshold)?;
        if ema_count.len() != cb.size() || ema_sum.shape() != cb.codes.shape() {
            return Err(Error::InvalidInput(
                "codebook statistics do not match codes".into(),
            ));
        }
        cb.ema_count = ema_count;
        cb.ema_sum = ema_sum;
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    pub fn code(&self, k: usize) -> &[f32] {
        self.codes.row(k)
    }

    pub fn ema_count(&self) -> &[f32] {
        &self.ema_count
    }

    pub fn ema_sum(&self) -> &Tensor {
        &self.ema_sum
    }

    /// Index of the nearest code to each row of `z` (`[.., d]`), ties to the
    /// lowest index.
    ///
    /// Candidates are screened with a matrix product, then every code within
    /// float32 rounding distance of the best score is re-ranked by an exact
    /// double-precision squared distance.
    pub fn quantize(&self, z: &Tensor) -> Result<QuantizedSequence> {
        let d = self.dim();
        if z.last_dim() != d {
            return Err(Error::shape(
                "quantize",
                format!("latent width {} against code width {d}", z.last_dim()),
            ));
        }
        let n = z.len() / d;
        let k = self.size();
        let mut dots = vec![0.0f32; n * k];
        crate::numerics::tensor::gemm(
            n,
            d,
            k,
            z.data(),
            d,
            1,
            self.codes.data(),
            1,
            d,
            &mut dots,
            k,
            false,
        );
        let code_sq: Vec<f32> = (0..k)
            .map(|j| self.code(j).iter().map(|v| v * v).sum())
            .collect();
        let max_code_sq = code_sq.iter().cloned().fold(0.0f32, f32::max);

        let mut indices = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n * d);
        for i in 0..n {
            let zi = &z.data()[i * d..(i + 1) * d];
            let z_sq: f32 = zi.iter().map(|v| v * v).sum();
            let row = &dots[i * k..(i + 1) * k];
            let scores: Vec<f32> = (0..k).map(|j| code_sq[j] - 2.0 * row[j]).collect();
            let best = scores.iter().cloned().fold(f32::INFINITY, f32::min);
            let tol = 1e-4 * (z_sq + max_code_sq) + 1e-6;
            let mut pick = usize::MAX;
            let mut pick_dist = f64::INFINITY;
            for (j, &s) in scores.iter().enumerate() {
                if s <= best + tol {
                    let dist = exact_sq_dist(zi, self.code(j));
                    if dist < pick_dist {
                        pick = j;
                        pick_dist = dist;
                    }
                }
            }
            if pick == usize::MAX {
                return Err(Error::InvalidInput(format!("latent {i} is not finite")));
            }
            indices.push(pick);
            vectors.extend_from_slice(self.code(pick));
        }
        let mut shape = z.shape().to_vec();
        if shape.len() == 1 {
            shape.insert(0, 1);
        }
        Ok(QuantizedSequence {
            indices,
            vectors: Tensor::new(&shape, vectors)?,
        })
    }

    /// Gather codes for `ids` into an `[N, d]` tensor.
    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor> {
        let d = self.dim();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= self.size() {
                return Err(Error::InvalidInput(format!(
                    "token {id} outside codebook of {}",
                    self.size()
                )));
            }
            out.extend_from_slice(self.code(id));
        }
        Tensor::new(&[ids.len(), d], out)
    }

    /// Moving-average code update from one batch, then reset of rarely used
    /// codes onto randomly chosen batch latents. Returns the number of resets.
    ///
    /// `latents` is `[.., d]` with one row per entry of `indices`.
    pub fn ema_update_and_reset<R: Rng + ?Sized>(
        &mut self,
        latents: &Tensor,
        indices: &[usize],
        rng: &mut R,
    ) -> Result<usize> {
        let d = self.dim();
        let k = self.size();
        if indices.is_empty() {
            return Ok(0);
        }
        if latents.len() != indices.len() * d {
            return Err(Error::shape(
                "ema_update",
                format!(
                    "{} latents of width {d} for {} indices",
                    latents.len() / d.max(1),
                    indices.len()
                ),
            ));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::InvalidInput(format!(
                "index {bad} outside codebook of {k}"
            )));
        }
        let mut counts = vec![0.0f32; k];
        let mut sums = vec![0.0f32; k * d];
        for (i, &idx) in indices.iter().enumerate() {
            counts[idx] += 1.0;
            let zi = &latents.data()[i * d..(i + 1) * d];
            for (s, v) in sums[idx * d..(idx + 1) * d].iter_mut().zip(zi) {
                *s += v;
            }
        }
        let g = self.decay;
        for j in 0..k {
            self.ema_count[j] = g * self.ema_count[j] + (1.0 - g) * counts[j];
            let sum = &mut self.ema_sum.row_mut(j)[..];
            for (s, b) in sum.iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                *s = g * *s + (1.0 - g) * b;
            }
            let c = self.ema_count[j];
            if c > 0.0 {
                let sum = self.ema_sum.row(j).to_vec();
                for (dst, s) in self.codes.row_mut(j).iter_mut().zip(sum) {
                    *dst = s / c;
                }
            }
        }

        let mut resets = 0;
        for j in 0..k {
            if self.ema_count[j] < self.reset_threshold {
                let pick = rng.random_range(0..indices.len());
                let z = latents.data()[pick * d..(pick + 1) * d].to_vec();
                self.codes.row_mut(j).copy_from_slice(&z);
                for (s, v) in self.ema_sum.row_mut(j).iter_mut().zip(&z) {
                    *s = v * RESET_COUNT;
                }
                self.ema_count[j] = RESET_COUNT;
                resets += 1;
            }
        }
        Ok(resets)
    }
}

fn exact_sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}
