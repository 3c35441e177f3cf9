use rand::Rng;

use super::model::{decoder_graph, encoder_graph, vq_loss, VqModel};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::motion::{MotionSequence, FEATURE_DIM};
use crate::numerics::{adam_step, clip_global_norm, AdamState, Tape, Tensor};
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct VqStepLog {
    pub step: usize,
    pub loss: f32,
    pub recon: f32,
    pub commit: f32,
    pub resets: usize,
    pub batch_codes_used: usize,
}

impl VqStepLog {
    pub const CSV_HEADER: &'static str = "step,loss,recon_l1,commit,resets,batch_codes_used";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.recon, self.commit, self.resets, self.batch_codes_used
        )
    }
}

pub struct VqTrainOutput {
    pub model: VqModel,
    pub adam: AdamState,
    pub log: Vec<VqStepLog>,
}

/// Train the tokenizer on fixed-length windows drawn uniformly from `train`.
///
/// Each step takes one Adam step on the encoder/decoder and one moving-average
/// update of the codebook. `on_step` sees every log entry as it is produced.
pub fn train_vqvae(
    train: &[MotionSequence],
    run: &RunConfig,
    mut on_step: impl FnMut(&VqStepLog),
) -> Result<VqTrainOutput> {
    let cfg = &run.vq;
    let mut rng = stream_rng(run.seed, "vq.train");
    let mut model = VqModel::init(cfg, &mut rng)?;
    model.fit_normalization(train)?;
    let usable: Vec<Vec<f32>> = train
        .iter()
        .filter(|m| m.num_frames() >= cfg.window)
        .map(|m| model.normalize(m))
        .collect();
    if usable.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no training sequence has the {} frames a window needs",
            cfg.window
        )));
    }

    let mut adam = AdamState::new(cfg.adam);
    let mut log = Vec::with_capacity(cfg.steps);
    let w = cfg.window;
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size * w * FEATURE_DIM);
        for _ in 0..cfg.batch_size {
            let seq = &usable[rng.random_range(0..usable.len())];
            let frames = seq.len() / FEATURE_DIM;
            let start = rng.random_range(0..=frames - w);
            batch.extend_from_slice(&seq[start * FEATURE_DIM..(start + w) * FEATURE_DIM]);
        }
        let x = Tensor::new(&[cfg.batch_size, w, FEATURE_DIM], batch)?;

        let (mut grads, z_val, indices, loss, recon, commit) = {
            let mut tape = Tape::new();
            let x = tape.constant(x);
            let z = encoder_graph(&mut tape, &model.params, cfg, x)?;
            let z_val = tape.value(z).clone();
            let q = model.codebook.quantize(&z_val)?;
            let st = tape.straight_through(z, q.vectors.clone())?;
            let recon = decoder_graph(&mut tape, &model.params, cfg, st)?;
            let (loss, rec, commit) = vq_loss(&mut tape, x, recon, z, &q.vectors, cfg.beta)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence(format!(
                    "tokenizer loss is {lv} at step {step}"
                )));
            }
            let grads = tape.backward(loss)?.into_param_grads(&model.params);
            (
                grads,
                z_val,
                q.indices,
                lv,
                tape.value(rec).item(),
                tape.value(commit).item(),
            )
        };
        clip_global_norm(&mut grads, cfg.grad_clip);
        adam_step(&mut model.params, &grads, &mut adam)?;
        let resets = model
            .codebook
            .ema_update_and_reset(&z_val, &indices, &mut rng)?;

        let mut used = indices.clone();
        used.sort_unstable();
        used.dedup();
        let entry = VqStepLog {
            step,
            loss,
            recon,
            commit,
            resets,
            batch_codes_used: used.len(),
        };
        on_step(&entry);
        log.push(entry);
    }
    Ok(VqTrainOutput { model, adam, log })
}

/// Fraction of codes that appear when tokenizing `seqs`.
pub fn codebook_utilization(model: &VqModel, seqs: &[MotionSequence]) -> Result<f32> {
    let mut seen = vec![false; model.codebook.size()];
    for ids in model.tokenize_many(seqs)? {
        for id in ids {
            seen[id] = true;
        }
    }
    Ok(seen.iter().filter(|&&s| s).count() as f32 / seen.len() as f32)
}

/// Median of `values` over consecutive windows of `window` entries.
pub fn windowed_medians(values: &[f32], window: usize) -> Vec<f32> {
    values
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| {
            let mut v = c.to_vec();
            v.sort_by(f32::total_cmp);
            v[v.len() / 2]
        })
        .collect()
}
