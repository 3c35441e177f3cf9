use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::layers::{conv, init_conv};
use crate::numerics::{ConvSpec, ParamStore, Tape, Var};

/// Output widths of the strided convolutions; the last is the audio token width.
pub const TEMPORAL_CHANNELS: [usize; 3] = [128, 256, 256];
const KERNEL: usize = 5;

/// Parameters `{prefix}.conv{i}` for a stack `mel_bins → … → out_dim`.
pub fn init_temporal_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    mel_bins: usize,
    out_dim: usize,
    rng: &mut R,
) -> Result<()> {
    let mut cin = mel_bins;
    let n = TEMPORAL_CHANNELS.len();
    for (i, &c) in TEMPORAL_CHANNELS.iter().enumerate() {
        let cout = if i + 1 == n { out_dim } else { c };
        init_conv(store, &format!("{prefix}.conv{i}"), cin, cout, KERNEL, rng)?;
        cin = cout;
    }
    Ok(())
}

/// `[B, F, mel]` frames at 100 Hz → `[B, target_len, out_dim]` audio tokens.
///
/// Three stride-2 convolutions with GELU bring the rate to 12.5 Hz; a final
/// linear interpolation lands on exactly `target_len` steps.
pub fn temporal_block<'s>(
    tape: &mut Tape<'s>,
    store: &'s ParamStore,
    prefix: &str,
    frames: Var,
    target_len: usize,
) -> Result<Var> {
    if target_len == 0 {
        return Err(Error::InvalidInput(
            "audio token length must be at least 1".into(),
        ));
    }
    let mut h = frames;
    for i in 0..TEMPORAL_CHANNELS.len() {
        h = conv(
            tape,
            store,
            &format!("{prefix}.conv{i}"),
            h,
            ConvSpec::strided(KERNEL, 2, 2),
        )?;
        h = tape.gelu(h)?;
    }
    tape.time_resample(h, target_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, random_projection, GradCheckOptions, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_length_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_temporal_block(&mut store, "t", 80, 256, &mut rng).unwrap();
        for (frames, target) in [(1, 1), (1, 5), (98, 5), (318, 16), (1000, 50), (7, 16)] {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::randn(&[2, frames, 80], 1.0, &mut rng));
            let y = temporal_block(&mut tape, &store, "t", x, target).unwrap();
            assert_eq!(tape.value(y).shape(), &[2, target, 256]);
        }
    }

    #[test]
    fn zero_frames_zero_bias_gives_zero_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_temporal_block(&mut store, "t", 80, 16, &mut rng).unwrap();
        for i in 0..3 {
            let name = format!("t.conv{i}.b");
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.set(&name, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 40, 80]));
        let y = temporal_block(&mut tape, &store, "t", x, 4).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_check() {
        // Three stacked layers: float32 rounding dominates a 1e-3 central
        // difference for the first layer, so the stack uses 1e-2.
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            init_temporal_block(&mut store, "t", 6, 5, &mut rng).unwrap();
            let x = Tensor::randn(&[1, 19, 6], 1.0, &mut rng);
            let report = finite_diff_check(
                &store,
                &[x],
                GradCheckOptions {
                    eps: 1e-2,
                    seed,
                    ..Default::default()
                },
                |t, s, v| {
                    let y = temporal_block(t, s, "t", v[0], 3)?;
                    random_projection(t, y, seed)
                },
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-3, "{:?}", report.per_tensor);
        }
    }
}
