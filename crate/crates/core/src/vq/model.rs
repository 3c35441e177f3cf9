use std::path::Path;

use rand::Rng;
use serde_json::json;

use super::codebook::{Codebook, QuantizedSequence};
use crate::config::{RunConfig, VqConfig};
use crate::error::{Error, Result};
use crate::motion::{MotionSequence, FEATURE_DIM};
use crate::numerics::layers::{conv, conv_transpose, init_conv, init_conv_transpose};
use crate::numerics::{Checkpoint, ConvSpec, ParamStore, Tape, Tensor, Var};

pub const CHECKPOINT_KIND: &str = "vqvae";
/// Floor on per-channel standard deviations used for normalization.
const STD_FLOOR: f32 = 1e-2;

/// Continuous encoder output at token rate.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    /// `[N, d]`.
    pub latents: Tensor,
    pub downsample: usize,
}

impl LatentSequence {
    pub fn len(&self) -> usize {
        self.latents.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

/// Convolutional motion autoencoder with a discrete bottleneck.
#[derive(Clone, Debug)]
pub struct VqModel {
    pub params: ParamStore,
    pub codebook: Codebook,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub config: VqConfig,
}

fn down_blocks(cfg: &VqConfig) -> usize {
    cfg.downsample.trailing_zeros() as usize
}

fn init_res_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    h: usize,
    rng: &mut R,
) -> Result<()> {
    init_conv(store, &format!("{prefix}.c1"), h, h, 3, rng)?;
    init_conv(store, &format!("{prefix}.c2"), h, h, 1, rng)
}

fn res_block<'s>(tape: &mut Tape<'s>, store: &'s ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let r = tape.gelu(x)?;
    let r = conv(tape, store, &format!("{prefix}.c1"), r, ConvSpec::same(3))?;
    let r = tape.gelu(r)?;
    let r = conv(tape, store, &format!("{prefix}.c2"), r, ConvSpec::same(1))?;
    tape.add(x, r)
}

/// Initialise encoder (`vq.enc.*`) and decoder (`vq.dec.*`) parameters.
pub fn init_autoencoder<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &VqConfig,
    rng: &mut R,
) -> Result<()> {
    let (h, d) = (cfg.hidden, cfg.code_dim);
    init_conv(store, "vq.enc.in", FEATURE_DIM, h, 3, rng)?;
    for i in 0..down_blocks(cfg) {
        init_conv(store, &format!("vq.enc.down{i}"), h, h, 4, rng)?;
        init_res_block(store, &format!("vq.enc.res{i}"), h, rng)?;
    }
    init_conv(store, "vq.enc.out", h, d, 3, rng)?;

    init_conv(store, "vq.dec.in", d, h, 3, rng)?;
    for i in 0..down_blocks(cfg) {
        init_res_block(store, &format!("vq.dec.res{i}"), h, rng)?;
        init_conv_transpose(store, &format!("vq.dec.up{i}"), h, h, 4, 2, rng)?;
    }
    init_conv(store, "vq.dec.out", h, FEATURE_DIM, 3, rng)
}

/// `[B, T, 263]` normalized features → `[B, T / l, d]` latents.
pub fn encoder_graph<'s>(
    tape: &mut Tape<'s>,
    store: &'s ParamStore,
    cfg: &VqConfig,
    x: Var,
) -> Result<Var> {
    let mut h = conv(tape, store, "vq.enc.in", x, ConvSpec::same(3))?;
    for i in 0..down_blocks(cfg) {
        h = tape.gelu(h)?;
        h = conv(
            tape,
            store,
            &format!("vq.enc.down{i}"),
            h,
            ConvSpec::strided(4, 2, 1),
        )?;
        h = res_block(tape, store, &format!("vq.enc.res{i}"), h)?;
    }
    let h = tape.gelu(h)?;
    conv(tape, store, "vq.enc.out", h, ConvSpec::same(3))
}

/// `[B, N, d]` codes → `[B, N · l, 263]` normalized features.
pub fn decoder_graph<'s>(
    tape: &mut Tape<'s>,
    store: &'s ParamStore,
    cfg: &VqConfig,
    q: Var,
) -> Result<Var> {
    let mut h = conv(tape, store, "vq.dec.in", q, ConvSpec::same(3))?;
    for i in 0..down_blocks(cfg) {
        h = res_block(tape, store, &format!("vq.dec.res{i}"), h)?;
        h = tape.gelu(h)?;
        h = conv_transpose(
            tape,
            store,
            &format!("vq.dec.up{i}"),
            h,
            ConvSpec::strided(4, 2, 1),
        )?;
    }
    let h = tape.gelu(h)?;
    conv(tape, store, "vq.dec.out", h, ConvSpec::same(3))
}

/// `‖m − m̂‖₁ (mean) + β · ‖z − sg[ẑ]‖₂² (mean)`. The quantized latents enter
/// as a constant, so no gradient reaches the codebook through this loss.
pub fn vq_loss(
    tape: &mut Tape<'_>,
    target: Var,
    recon: Var,
    z: Var,
    z_hat: &Tensor,
    beta: f32,
) -> Result<(Var, Var, Var)> {
    let rec = tape.l1_mean(target, recon)?;
    let zq = tape.constant(z_hat.clone());
    let commit = tape.sq_diff_mean(z, zq)?;
    let total = tape.weighted_sum(&[(rec, 1.0), (commit, beta)])?;
    Ok((total, rec, commit))
}

impl VqModel {
    pub fn init<R: Rng + ?Sized>(cfg: &VqConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        init_autoencoder(&mut params, cfg, rng)?;
        let codebook = Codebook::random(
            cfg.codebook_size,
            cfg.code_dim,
            cfg.ema_decay,
            cfg.reset_threshold,
            rng,
        )?;
        Ok(Self {
            params,
            codebook,
            mean: vec![0.0; FEATURE_DIM],
            std: vec![1.0; FEATURE_DIM],
            config: cfg.clone(),
        })
    }

    /// Per-channel mean and standard deviation over every frame of `corpus`.
    pub fn fit_normalization(&mut self, corpus: &[MotionSequence]) -> Result<()> {
        let mut n = 0usize;
        let mut sum = vec![0.0f64; FEATURE_DIM];
        let mut sq = vec![0.0f64; FEATURE_DIM];
        for m in corpus {
            for t in 0..m.num_frames() {
                for (c, &v) in m.frame(t).iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += v as f64 * v as f64;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::InsufficientData(
                "no frames to normalize over".into(),
            ));
        }
        for c in 0..FEATURE_DIM {
            let mean = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - mean * mean).max(0.0);
            self.mean[c] = mean as f32;
            self.std[c] = (var.sqrt() as f32).max(STD_FLOOR);
        }
        Ok(())
    }

    pub fn downsample(&self) -> usize {
        self.config.downsample
    }

    pub fn normalize(&self, m: &MotionSequence) -> Vec<f32> {
        m.data()
            .chunks(FEATURE_DIM)
            .flat_map(|f| {
                f.iter()
                    .enumerate()
                    .map(|(c, &v)| (v - self.mean[c]) / self.std[c])
            })
            .collect()
    }

    pub fn denormalize(&self, data: &[f32]) -> Vec<f32> {
        data.chunks(FEATURE_DIM)
            .flat_map(|f| {
                f.iter()
                    .enumerate()
                    .map(|(c, &v)| v * self.std[c] + self.mean[c])
            })
            .collect()
    }

    /// Normalized frames padded by repeating the last frame to a multiple of `l`.
    fn padded_input(&self, m: &MotionSequence) -> Result<(Vec<f32>, usize)> {
        let l = self.downsample();
        let t = m.num_frames();
        if t < l {
            return Err(Error::InsufficientLength { needed: l, got: t });
        }
        let mut x = self.normalize(m);
        let padded = t.div_ceil(l) * l;
        let last = x[(t - 1) * FEATURE_DIM..].to_vec();
        for _ in t..padded {
            x.extend_from_slice(&last);
        }
        Ok((x, padded))
    }

    /// Encode sequences of equal length in one batch.
    pub fn encode_batch(&self, seqs: &[&MotionSequence]) -> Result<Vec<LatentSequence>> {
        let Some(first) = seqs.first() else {
            return Ok(Vec::new());
        };
        let t = first.num_frames();
        if seqs.iter().any(|m| m.num_frames() != t) {
            return Err(Error::InvalidInput(
                "batched sequences differ in length".into(),
            ));
        }
        let mut data = Vec::new();
        let mut padded = 0;
        for m in seqs {
            let (x, p) = self.padded_input(m)?;
            data.extend(x);
            padded = p;
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[seqs.len(), padded, FEATURE_DIM], data)?);
        let z = encoder_graph(&mut tape, &self.params, &self.config, x)?;
        let zv = tape.value(z);
        let n = zv.shape()[1];
        let d = zv.shape()[2];
        Ok((0..seqs.len())
            .map(|b| LatentSequence {
                latents: Tensor::new(&[n, d], zv.data()[b * n * d..(b + 1) * n * d].to_vec())
                    .expect("slice length matches"),
                downsample: self.downsample(),
            })
            .collect())
    }

    pub fn encode(&self, m: &MotionSequence) -> Result<LatentSequence> {
        Ok(self.encode_batch(&[m])?.remove(0))
    }

    pub fn quantize(&self, z: &LatentSequence) -> Result<QuantizedSequence> {
        self.codebook.quantize(&z.latents)
    }

    pub fn tokenize(&self, m: &MotionSequence) -> Result<Vec<usize>> {
        Ok(self.quantize(&self.encode(m)?)?.indices)
    }

    /// Tokenize many sequences, batching runs of equal length.
    pub fn tokenize_many(&self, seqs: &[MotionSequence]) -> Result<Vec<Vec<usize>>> {
        const CHUNK: usize = 32;
        let mut out = vec![Vec::new(); seqs.len()];
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.sort_by_key(|&i| seqs[i].num_frames());
        for group in order.chunk_by(|&a, &b| seqs[a].num_frames() == seqs[b].num_frames()) {
            for chunk in group.chunks(CHUNK) {
                let refs: Vec<&MotionSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
                for (&i, z) in chunk.iter().zip(self.encode_batch(&refs)?) {
                    out[i] = self.quantize(&z)?.indices;
                }
            }
        }
        Ok(out)
    }

    /// Decode `[N, d]` code vectors to `N · l` frames.
    pub fn decode_vectors(&self, vectors: &Tensor, fps: u32) -> Result<MotionSequence> {
        let n = vectors.rows();
        if n == 0 {
            return Err(Error::InvalidInput("nothing to decode".into()));
        }
        let mut tape = Tape::new();
        let q = tape.constant(vectors.clone().reshape(&[1, n, self.codebook.dim()])?);
        let out = decoder_graph(&mut tape, &self.params, &self.config, q)?;
        MotionSequence::new(self.denormalize(tape.value(out).data()), fps)
    }

    pub fn decode(&self, q: &QuantizedSequence, fps: u32) -> Result<MotionSequence> {
        self.decode_vectors(&q.vectors, fps)
    }

    pub fn decode_tokens(&self, ids: &[usize], fps: u32) -> Result<MotionSequence> {
        self.decode_vectors(&self.codebook.lookup(ids)?, fps)
    }

    /// Mean absolute reconstruction error in normalized feature units.
    pub fn reconstruction_l1(&self, seqs: &[MotionSequence]) -> Result<f32> {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for m in seqs {
            let ids = self.tokenize(m)?;
            let rec = self.decode_tokens(&ids, m.fps())?;
            let (a, b) = (self.normalize(m), self.normalize(&rec));
            for (x, y) in a.iter().zip(&b) {
                total += (x - y).abs() as f64;
            }
            count += a.len();
        }
        if count == 0 {
            return Err(Error::InsufficientData("no sequences to evaluate".into()));
        }
        Ok((total / count as f64) as f32)
    }

    pub fn to_checkpoint(&self, run: &RunConfig) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "kind": CHECKPOINT_KIND,
            "config": run,
            "config_hash": run.hash(),
        }))
        .with_params(&self.params);
        let cb = &self.codebook;
        ck.tensors
            .insert("codebook.codes".into(), cb.codes().clone());
        ck.tensors.insert(
            "codebook.ema_count".into(),
            Tensor::new(&[cb.size()], cb.ema_count().to_vec()).expect("length matches"),
        );
        ck.tensors
            .insert("codebook.ema_sum".into(), cb.ema_sum().clone());
        ck.tensors.insert(
            "norm.mean".into(),
            Tensor::new(&[FEATURE_DIM], self.mean.clone()).expect("length matches"),
        );
        ck.tensors.insert(
            "norm.std".into(),
            Tensor::new(&[FEATURE_DIM], self.std.clone()).expect("length matches"),
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, RunConfig)> {
        let run = checkpoint_config(ck, CHECKPOINT_KIND)?;
        let cfg = run.vq.clone();
        let take = |name: &str| -> Result<Tensor> {
            ck.tensors
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Compatibility(format!("checkpoint lacks `{name}`")))
        };
        let codebook = Codebook::from_parts(
            take("codebook.codes")?,
            take("codebook.ema_count")?.into_data(),
            take("codebook.ema_sum")?,
            cfg.ema_decay,
            cfg.reset_threshold,
        )?;
        if codebook.size() != cfg.codebook_size || codebook.dim() != cfg.code_dim {
            return Err(Error::Compatibility(format!(
                "codebook {}×{} but config says {}×{}",
                codebook.size(),
                codebook.dim(),
                cfg.codebook_size,
                cfg.code_dim
            )));
        }
        let mut params = ParamStore::new();
        for (name, t) in ck.params()?.iter() {
            if name.starts_with("vq.") {
                params.insert(name, t.clone())?;
            }
        }
        let model = Self {
            params,
            codebook,
            mean: take("norm.mean")?.into_data(),
            std: take("norm.std")?.into_data(),
            config: cfg,
        };
        Ok((model, run))
    }

    pub fn load(stem: &Path) -> Result<(Self, RunConfig)> {
        Self::from_checkpoint(&Checkpoint::load(stem)?)
    }
}

/// The run config embedded in a checkpoint of the given kind, with its hash verified.
pub fn checkpoint_config(ck: &Checkpoint, kind: &str) -> Result<RunConfig> {
    let found = ck.meta.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    if found != kind {
        return Err(Error::Compatibility(format!(
            "expected a `{kind}` checkpoint, found `{found}`"
        )));
    }
    let run: RunConfig = serde_json::from_value(
        ck.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Compatibility("checkpoint has no config".into()))?,
    )?;
    let stored = ck
        .meta
        .get("config_hash")
        .and_then(|h| h.as_str())
        .unwrap_or("");
    if stored != run.hash() {
        return Err(Error::Compatibility(
            "checkpoint config does not match its recorded hash".into(),
        ));
    }
    Ok(run)
}
