//! Acceptance run. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any fails.
//!
//! Criteria 4, 5, 6, 9 and 10 share one staged run of `configs/default.json`
//! driven through the `versa` binary (synthesis, tokenizer, text stage, audio
//! stage, bank, evaluation). It takes tens of minutes on one core; set
//! `VERSA_ACCEPTANCE_QUICK=1` to skip those criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use versa_core::conditioning::{write_wav, SPEECH_PROMPT};
use versa_core::config::GeneratorConfig;
use versa_core::datagen::load_split;
use versa_core::generator::{
    audio_branch, audio_branch_loss, forward_fused, mask_tokens, masked_token_accuracy,
    text_branch, text_branch_loss, text_logits, GeneratorModel,
};
use versa_core::metrics::{
    fid, js_divergence, mm_dist, mmodality_single, r_precision, token_histogram, EvalReport,
};
use versa_core::motion::BONES_2D;
use versa_core::numerics::layers::{self, sinusoidal_positions};
use versa_core::numerics::{
    finite_diff_check, random_projection, ConvSpec, GradCheckOptions, ParamStore, Tape, Tensor,
};
use versa_core::pipeline::{audio_examples, audio_vs_text_only, text_examples};
use versa_core::rng::stream_rng;
use versa_core::token2pose::{retarget, translate_tokens};
use versa_core::vq::{codebook_utilization, read_tokens, vq_loss, Codebook};
use versa_core::{RelationBank, Split, StoredSample, TargetSkeleton, VqModel};

/// Held-out reconstruction L1 ceiling for the default tokenizer run.
/// The reference run of the default config reached 0.0314.
const VQ_HELDOUT_L1_MAX: f32 = 0.04;
const VQ_UTILIZATION_MIN: f32 = 0.5;
const VQ_RUNTIME_MAX: Duration = Duration::from_secs(30 * 60);
const GENERATE_RUNTIME_MAX: Duration = Duration::from_secs(60);
/// Token-histogram JS divergence (nats) between a named-family prompt and the
/// default prompt on the same audio. The reference run measured 0.693 (disjoint
/// histograms) on this input and 0.488 on another ten-second clip.
const PROMPT_JS_MIN: f64 = 0.25;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// 1 ------------------------------------------------------------------------

fn quantization_oracle() -> Outcome {
    let mut r = rng(1);
    let book = Codebook::random(512, 512, 0.99, 1.0, &mut r).unwrap();
    let z = Tensor::randn(&[1000, 512], 1.0 / (512f32).sqrt(), &mut r);
    let start = Instant::now();
    let q = book.quantize(&z).unwrap();
    let elapsed = start.elapsed();
    let mut mismatches = 0;
    for i in 0..1000 {
        let row = z.row(i);
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for k in 0..512 {
            let d: f64 = row
                .iter()
                .zip(book.code(k))
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum();
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        mismatches += usize::from(q.indices[i] != best);
    }
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!(
            "{} of 1000 indices match exhaustive search, {:.3} s",
            1000 - mismatches,
            elapsed.as_secs_f64()
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn gradient_integrity() -> Outcome {
    let opts = |seed| GradCheckOptions {
        seed,
        ..Default::default()
    };
    let mut layer_worst = 0.0f32;
    let mut block_worst = 0.0f32;
    let mut fused_worst = 0.0f32;
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        layers::init_linear(&mut store, "lin", 6, 5, &mut r).unwrap();
        layers::init_layer_norm(&mut store, "ln", 5).unwrap();
        store.set("ln.g", Tensor::randn(&[5], 1.0, &mut r)).unwrap();
        store.set("ln.b", Tensor::randn(&[5], 1.0, &mut r)).unwrap();
        layers::init_conv(&mut store, "conv", 5, 4, 3, &mut r).unwrap();
        let x = Tensor::randn(&[2, 6, 6], 1.0, &mut r);
        let lin = finite_diff_check(&store, std::slice::from_ref(&x), opts(seed), |t, s, v| {
            let y = layers::linear(t, s, "lin", v[0])?;
            random_projection(t, y, seed)
        })
        .unwrap();
        let ln = finite_diff_check(&store, std::slice::from_ref(&x), opts(seed), |t, s, v| {
            let y = layers::linear(t, s, "lin", v[0])?;
            let y = layers::layer_norm(t, s, "ln", y)?;
            random_projection(t, y, seed + 1)
        })
        .unwrap();
        let conv = finite_diff_check(&store, std::slice::from_ref(&x), opts(seed), |t, s, v| {
            let y = layers::linear(t, s, "lin", v[0])?;
            let y = layers::conv(t, s, "conv", y, ConvSpec::strided(3, 2, 1))?;
            random_projection(t, y, seed + 2)
        })
        .unwrap();
        layer_worst = layer_worst
            .max(lin.max_rel_error)
            .max(ln.max_rel_error)
            .max(conv.max_rel_error);

        let mut store = ParamStore::new();
        layers::init_transformer_block(&mut store, "blk", 8, 16, &mut r).unwrap();
        let x = Tensor::randn(&[2, 5, 8], 1.0, &mut r);
        let pos = sinusoidal_positions(5, 8);
        let blk = finite_diff_check(&store, &[x], opts(seed), |t, s, v| {
            let p = t.constant(pos.clone());
            let h = t.add_broadcast(v[0], p)?;
            let h = layers::transformer_block(t, s, "blk", h, 2)?;
            random_projection(t, h, seed)
        })
        .unwrap();
        block_worst = block_worst.max(blk.max_rel_error);

        let cfg = GeneratorConfig {
            layers: 2,
            heads: 2,
            width: 8,
            ff_width: 16,
            audio_dim: 6,
            text_dim: 10,
            mel_bins: 5,
            window_tokens: 4,
            overlap_tokens: 1,
            ..GeneratorConfig::default()
        };
        let model = GeneratorModel::init(&cfg, 7, &mut r).unwrap();
        let mel = Tensor::randn(&[2, 23, cfg.mel_bins], 1.0, &mut r);
        let text = Tensor::randn(&[2, cfg.text_dim], 1.0, &mut r);
        let ids: Vec<usize> = (0..8).map(|_| r.random_range(0..8)).collect();
        // A deep float32 stack needs a coarser step than single layers.
        let fused = finite_diff_check(
            &model.params,
            &[mel],
            GradCheckOptions {
                eps: 5e-2,
                seed,
                ..Default::default()
            },
            |t, s, v| {
                let logits = forward_fused(t, s, &cfg, v[0], &text, &ids)?;
                random_projection(t, logits, seed)
            },
        )
        .unwrap();
        fused_worst = fused_worst.max(fused.max_rel_error);
    }
    outcome(
        layer_worst < 1e-3 && block_worst < 5e-3 && fused_worst < 5e-3,
        format!(
            "worst relative error over 20 seeds: layers {layer_worst:.2e}, transformer block {block_worst:.2e}, fused dual-branch {fused_worst:.2e}"
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn loss_anchors() -> Outcome {
    let mut r = rng(3);
    let cfg = GeneratorConfig {
        layers: 2,
        width: 24,
        heads: 2,
        ff_width: 32,
        ..GeneratorConfig::default()
    };
    let mut model = GeneratorModel::init(&cfg, 512, &mut r).unwrap();
    for name in [
        "gen.text.head.w",
        "gen.text.head.b",
        "gen.audio.head.w",
        "gen.audio.head.b",
    ] {
        let shape = model.params.get(name).unwrap().shape().to_vec();
        model.params.set(name, Tensor::zeros(&shape)).unwrap();
    }
    let tokens: Vec<usize> = (0..32).map(|_| r.random_range(0..512)).collect();
    let m = mask_tokens(&tokens, 0.5, 512, &mut r).unwrap();
    let text = Tensor::randn(&[2, 512], 1.0, &mut r);
    let mut tape = Tape::new();
    let branch = text_branch(&mut tape, &model.params, &cfg, &text, &m.ids).unwrap();
    let logits = text_logits(&mut tape, &model.params, &branch).unwrap();
    let l = text_branch_loss(&mut tape, logits, &tokens, &m.flags).unwrap();
    let text_ce = tape.value(l).item() as f64;
    let mel = tape.constant(Tensor::randn(&[2, 60, 80], 1.0, &mut r));
    let logits = forward_fused(&mut tape, &model.params, &cfg, mel, &text, &m.ids).unwrap();
    let l = audio_branch_loss(&mut tape, logits, &tokens).unwrap();
    let audio_ce = tape.value(l).item() as f64;
    let ln512 = 512f64.ln();

    let mut tape = Tape::new();
    let target = tape.input(Tensor::randn(&[2, 8, 3], 1.0, &mut r));
    let zt = Tensor::randn(&[4, 5], 1.0, &mut r);
    let z = tape.input(zt.clone());
    let (total, _, _) = vq_loss(&mut tape, target, target, z, &zt, 0.25).unwrap();
    let perfect = tape.value(total).item();

    let mut tape = Tape::new();
    let z = tape.input(Tensor::randn(&[6, 5], 1.0, &mut r));
    let zq = tape
        .straight_through(z, Tensor::randn(&[6, 5], 1.0, &mut r))
        .unwrap();
    let c = Tensor::randn(&[6, 5], 1.0, &mut r);
    let loss = tape.dot_const(zq, c.clone()).unwrap();
    let g = tape.backward(loss).unwrap();
    let st_identity = g.wrt(z).unwrap().data() == g.wrt(zq).unwrap().data()
        && g.wrt(zq).unwrap().data() == c.data();

    outcome(
        (text_ce - ln512).abs() < 1e-3 && (audio_ce - ln512).abs() < 1e-3 && perfect == 0.0 && st_identity,
        format!(
            "uniform CE text {text_ce:.6} audio {audio_ce:.6} (ln 512 = {ln512:.6}); vq_loss on perfect reconstruction {perfect}; straight-through identity {st_identity}"
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn fusion_identity() -> Outcome {
    let mut r = rng(7);
    let cfg = GeneratorConfig {
        layers: 3,
        width: 48,
        heads: 6,
        ff_width: 96,
        ..GeneratorConfig::default()
    };
    let model = GeneratorModel::init(&cfg, 512, &mut r).unwrap();
    let mut identical = 0;
    for _ in 0..100 {
        let t = r.random_range(1..=16);
        let frames = r.random_range(1..200);
        let mut tape = Tape::new();
        let mel = tape.constant(Tensor::randn(&[1, frames, 80], 2.0, &mut r));
        let plain = audio_branch(&mut tape, &model.params, &cfg, mel, t, None).unwrap();
        let zeros: Vec<_> = (0..cfg.layers)
            .map(|_| tape.constant(Tensor::zeros(&[1, t, cfg.width])))
            .collect();
        let fused = audio_branch(&mut tape, &model.params, &cfg, mel, t, Some(&zeros)).unwrap();
        let (a, b) = (tape.value(plain).data(), tape.value(fused).data());
        identical += usize::from(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    outcome(
        identical == 100,
        format!("{identical} of 100 cases bitwise identical"),
    )
}

// 8 ------------------------------------------------------------------------

fn gaussian_set(n: usize, d: usize, shift: f64, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|i| {
                    let u: f64 = r.random_range(-1.0..1.0);
                    let v: f64 = r.random_range(-1.0..1.0);
                    (u + v) * (1.0 + 0.1 * i as f64) + shift
                })
                .collect()
        })
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn mean_cov_oracle(x: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = x[0].len();
    let m = DMatrix::from_fn(x.len(), d, |i, j| x[i][j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
    let mut c = DMatrix::zeros(d, d);
    for row in x {
        let v = DVector::from_column_slice(row) - &mean;
        c += &v * v.transpose();
    }
    (
        mean,
        c / (x.len() as f64 - 1.0) + DMatrix::identity(d, d) * 1e-6,
    )
}

fn fid_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (ma, ca) = mean_cov_oracle(a);
    let (mb, cb) = mean_cov_oracle(b);
    let n = ca.nrows();
    // Denman–Beavers square root of the product.
    let mut y = &ca * &cb;
    let mut z = DMatrix::identity(n, n);
    for _ in 0..60 {
        let yi = y.clone().try_inverse().unwrap();
        let zi = z.clone().try_inverse().unwrap();
        y = (&y + zi) * 0.5;
        z = (&z + yi) * 0.5;
    }
    (ma - mb).norm_squared() + (ca + cb - y * 2.0).trace()
}

fn metrics_consistency() -> Outcome {
    let mut r = rng(8);
    let mut worst_self = 0.0f64;
    let mut worst_sym = 0.0f64;
    let mut worst_fid_oracle = 0.0f64;
    for _ in 0..10 {
        let a = gaussian_set(64, 8, 0.0, &mut r);
        let b = gaussian_set(48, 8, 0.6, &mut r);
        worst_self = worst_self.max(fid(&a, &a).unwrap().abs());
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        worst_sym = worst_sym.max((ab - ba).abs());
        worst_fid_oracle = worst_fid_oracle.max((ab - fid_oracle(&a, &b)).abs());
    }
    let p = vec![vec![1.0, 2.0, 3.0, 0.5]; 6];
    let q = vec![vec![4.0, 2.0, -1.0, 0.5]; 9];
    let point_err = (fid(&p, &q).unwrap() - 25.0).abs();

    let mut monotone = true;
    let mut worst_rank = 0.0f64;
    for _ in 0..200 {
        let m = gaussian_set(32, 5, 0.0, &mut r);
        let t: Vec<Vec<f64>> = m
            .iter()
            .map(|v| v.iter().map(|x| x + r.random_range(-1.0..1.0)).collect())
            .collect();
        let got = r_precision(&m, &t).unwrap();
        monotone &= got[0] <= got[1] && got[1] <= got[2];
        let mut want = [0.0; 3];
        for i in 0..32 {
            let own = euclid(&m[i], &t[i]);
            let rank = (0..32)
                .filter(|&j| {
                    let d = euclid(&m[i], &t[j]);
                    d < own || (d == own && j < i)
                })
                .count();
            for (k, w) in want.iter_mut().enumerate() {
                if rank <= k {
                    *w += 1.0 / 32.0;
                }
            }
        }
        for k in 0..3 {
            worst_rank = worst_rank.max((got[k] - want[k]).abs());
        }
    }

    let m = gaussian_set(40, 6, 0.0, &mut r);
    let t = gaussian_set(40, 6, 0.2, &mut r);
    let mm_want = m.iter().zip(&t).map(|(a, b)| euclid(a, b)).sum::<f64>() / 40.0;
    let mm_err = (mm_dist(&m, &t).unwrap() - mm_want).abs();

    let feats = gaussian_set(30, 6, 0.0, &mut r);
    let mut order: Vec<usize> = (0..30).collect();
    order.shuffle(&mut stream_rng(5, "metrics.mmodality"));
    let mmod_want = (0..10)
        .map(|p| euclid(&feats[order[2 * p]], &feats[order[2 * p + 1]]))
        .sum::<f64>()
        / 10.0;
    let mmod_err = (mmodality_single(&feats, 10, 5).unwrap() - mmod_want).abs();

    let ids_a: Vec<usize> = (0..64).map(|_| r.random_range(0..16)).collect();
    let ids_b: Vec<usize> = (0..64).map(|_| r.random_range(4..20)).collect();
    let (ha, hb) = (token_histogram(&ids_a, 20), token_histogram(&ids_b, 20));
    let kl = |p: &[f64], q: &[f64]| -> f64 {
        p.iter()
            .zip(q)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    let mid: Vec<f64> = ha.iter().zip(&hb).map(|(x, y)| 0.5 * (x + y)).collect();
    let js_want = 0.5 * kl(&ha, &mid) + 0.5 * kl(&hb, &mid);
    let js_err = (js_divergence(&ha, &hb) - js_want).abs();

    let pass = worst_self < 1e-6
        && worst_sym < 1e-6
        && point_err < 1e-3
        && monotone
        && worst_rank < 1e-6
        && worst_fid_oracle < 1e-6
        && mm_err < 1e-6
        && mmod_err < 1e-6
        && js_err < 1e-6;
    outcome(
        pass,
        format!(
            "fid(A,A) {worst_self:.1e}, asymmetry {worst_sym:.1e}, point-mass error {point_err:.1e}, r_precision monotone {monotone}; oracle gaps: rank {worst_rank:.1e}, fid {worst_fid_oracle:.1e}, mm_dist {mm_err:.1e}, mmodality {mmod_err:.1e}, js {js_err:.1e}"
        ),
    )
}

// Staged run ------------------------------------------------------------------

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

type StagedCheck = (String, &'static str, fn(&Pipeline) -> Outcome);

struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
    vq_time: Duration,
    failure: Option<String>,
}

impl Pipeline {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn ckpt(&self) -> PathBuf {
        self.root.join("ck")
    }
}

fn versa(args: &[&str]) -> Result<(Duration, String), String> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_versa"))
        .args(args)
        .env_remove("VERSA_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    if !out.status.success() {
        return Err(format!(
            "versa {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok((elapsed, String::from_utf8_lossy(&out.stdout).into_owned()))
}

fn run_pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let mut p = Pipeline {
        _dir: dir,
        root,
        vq_time: Duration::ZERO,
        failure: None,
    };
    let config = workspace_root().join("configs/default.json");
    let (c, d, k) = (
        config.to_str().unwrap().to_string(),
        p.data().to_str().unwrap().to_string(),
        p.ckpt().to_str().unwrap().to_string(),
    );
    let steps: Vec<Vec<&str>> = vec![
        vec!["-c", &c, "data-synth", "--out", &d],
        vec!["-c", &c, "train", "vqvae", "--data", &d, "--ckpt", &k],
        vec!["-c", &c, "train", "text", "--data", &d, "--ckpt", &k],
        vec!["-c", &c, "train", "audio", "--data", &d, "--ckpt", &k],
        vec!["bank-build", "--data", &d, "--ckpt", &k],
    ];
    for args in steps {
        let shown = if args[0] == "-c" { &args[2..] } else { &args[..] };
        eprintln!("acceptance: versa {}", shown.join(" "));
        match versa(&args) {
            Ok((t, _)) => {
                if args.contains(&"vqvae") {
                    p.vq_time = t;
                }
            }
            Err(e) => {
                p.failure = Some(e);
                return p;
            }
        }
    }
    let report = p.root.join("report.json");
    if let Err(e) = versa(&[
        "evaluate",
        "--data",
        &d,
        "--ckpt",
        &k,
        "--out",
        report.to_str().unwrap(),
    ]) {
        p.failure = Some(e);
    }
    p
}

fn split(p: &Pipeline, s: Split) -> Vec<StoredSample> {
    load_split(&p.data(), Some(s)).unwrap()
}

fn tokenizer(p: &Pipeline) -> VqModel {
    VqModel::load(&p.ckpt().join("vqvae")).unwrap().0
}

// 4 ------------------------------------------------------------------------

fn tokenizer_training(p: &Pipeline) -> Outcome {
    let vq = tokenizer(p);
    let test: Vec<_> = split(p, Split::Test)
        .into_iter()
        .map(|s| s.motion)
        .collect();
    let train: Vec<_> = split(p, Split::Train)
        .into_iter()
        .map(|s| s.motion)
        .collect();
    let l1 = vq.reconstruction_l1(&test).unwrap();
    let util = codebook_utilization(&vq, &train).unwrap();
    let util_test = codebook_utilization(&vq, &test).unwrap();
    outcome(
        l1 < VQ_HELDOUT_L1_MAX && util > VQ_UTILIZATION_MIN && p.vq_time < VQ_RUNTIME_MAX,
        format!(
            "held-out L1 {l1:.4} (< {VQ_HELDOUT_L1_MAX}), utilization train {:.1}% test {:.1}% (> 50%), 2000 steps in {:.0} s",
            util * 100.0,
            util_test * 100.0,
            p.vq_time.as_secs_f64()
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn text_stage_learning(p: &Pipeline) -> Outcome {
    let vq = tokenizer(p);
    let text = GeneratorModel::load(&p.ckpt().join("text")).unwrap();
    let test = split(p, Split::Test);
    let items: Vec<_> = test.iter().map(StoredSample::paired).collect();
    let examples = text_examples(&vq, &items).unwrap();
    let acc = masked_token_accuracy(&text.model, &examples, 0.5, text.run.seed).unwrap() as f64;
    let report: EvalReport =
        serde_json::from_slice(&std::fs::read(p.root.join("report.json")).unwrap()).unwrap();
    let (acc_floor, r1_floor) = (3.0 / 512.0, 3.0 / 32.0);
    outcome(
        acc > acc_floor && report.r_precision[0] > r1_floor,
        format!(
            "held-out masked-token accuracy {acc:.4} (> {acc_floor:.4}); R-Precision top-1/2/3 {:.3}/{:.3}/{:.3} (> {r1_floor:.4}), real motion {:.3}; FID {:.3}, MM-Dist {:.3}, MModality {:.3}",
            report.r_precision[0],
            report.r_precision[1],
            report.r_precision[2],
            report.r_precision_real[0],
            report.fid,
            report.mm_dist,
            report.mmodality
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn audio_stage_learning(p: &Pipeline) -> Outcome {
    let vq = tokenizer(p);
    let text = GeneratorModel::load(&p.ckpt().join("text")).unwrap();
    let audio = GeneratorModel::load(&p.ckpt().join("audio")).unwrap();
    let test = split(p, Split::Test);
    let items: Vec<_> = test.iter().map(StoredSample::paired).collect();
    let examples = audio_examples(&vq, &items).unwrap();
    let (fused, baseline) = audio_vs_text_only(&audio.model, &examples).unwrap();
    let (before, after) = (text.model.text_params(), audio.model.text_params());
    let frozen = before.names().count() == after.names().count()
        && before.iter().all(|(name, t)| {
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            after.get(name).is_some_and(|u| bits(u) == bits(t))
        });
    outcome(
        fused > baseline && frozen,
        format!(
            "held-out token accuracy with audio {fused:.4} vs text-only under \"{SPEECH_PROMPT}\" {baseline:.4}; text branch bytes unchanged {frozen}"
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn token_to_pose(p: &Pipeline) -> Outcome {
    let vq = tokenizer(p);
    let (bank, _) = RelationBank::load(&p.ckpt().join("bank")).unwrap();
    let l = bank.snippet_len();
    let known: Vec<usize> = bank.token_ids().collect();
    let mut r = rng(9);
    let mut lengths_ok = true;
    let mut worst_bone = 0.0f32;
    let mut seams_ok = 0;
    let mut worst_ratio = 0.0f32;
    let cases = 200;
    for case in 0..cases {
        let n = r.random_range(1..=24);
        let ids: Vec<usize> = (0..n)
            .map(|_| {
                if r.random_bool(0.9) {
                    known[r.random_range(0..known.len())]
                } else {
                    r.random_range(0..vq.codebook.size())
                }
            })
            .collect();
        let seq = translate_tokens(&ids, &bank, &vq, 20, case).unwrap();
        lengths_ok &= seq.num_frames() == n * l;

        let lengths: Vec<f32> = (0..BONES_2D.len())
            .map(|_| r.random_range(0.02..0.2))
            .collect();
        let target = TargetSkeleton::new(lengths.clone(), [0.5, 0.5]).unwrap();
        let out = retarget(&seq, &target).unwrap();
        for t in 0..out.num_frames() {
            for (b, &(pa, ch)) in BONES_2D.iter().enumerate() {
                let (a, c) = (out.joint(t, pa), out.joint(t, ch));
                let len = ((c[0] - a[0]).powi(2) + (c[1] - a[1]).powi(2)).sqrt();
                worst_bone = worst_bone.max((len - lengths[b]).abs());
            }
        }
    }

    // Seams of a repeated token against the largest step inside that
    // token's stored snippets.
    let mut seams = 0;
    for &id in &known {
        let bound = bank
            .snippets(id)
            .iter()
            .flat_map(|s| (0..l - 1).map(move |t| s.poses.max_joint_displacement(t, t + 1)))
            .fold(0.0f32, f32::max);
        for seed in 0..3 {
            let seq = translate_tokens(&[id, id, id], &bank, &vq, 20, seed).unwrap();
            for s in [l - 1, 2 * l - 1] {
                let jump = seq.max_joint_displacement(s, s + 1);
                seams += 1;
                if jump <= bound + 1e-6 {
                    seams_ok += 1;
                }
                if bound > 0.0 {
                    worst_ratio = worst_ratio.max(jump / bound);
                }
            }
        }
    }
    outcome(
        lengths_ok && worst_bone < 1e-5 && seams_ok == seams,
        format!(
            "length = tokens x {l} on all {cases} inputs {lengths_ok}; worst retarget bone error {worst_bone:.1e}; repeated-token seams within the bank's intra-snippet steps {seams_ok}/{seams} (worst ratio {worst_ratio:.3}); bank of {} snippets over {} tokens",
            bank.num_snippets(),
            known.len()
        ),
    )
}

// 10 -----------------------------------------------------------------------

fn end_to_end(p: &Pipeline) -> Outcome {
    let test = split(p, Split::Test);
    let mut audio: Vec<f32> = test
        .iter()
        .flat_map(|s| s.audio.iter().copied())
        .take(160_000)
        .collect();
    audio.resize(160_000, 0.0);
    let wav = p.root.join("ten_seconds.wav");
    write_wav(&wav, &audio).unwrap();
    let k = p.ckpt();
    let mut times = Vec::new();
    for name in ["gen_a", "gen_b"] {
        let out = p.root.join(name);
        match versa(&[
            "generate",
            "--audio",
            wav.to_str().unwrap(),
            "--ckpt",
            k.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]) {
            Ok((t, _)) => times.push(t),
            Err(e) => return outcome(false, e),
        }
    }
    let same = ["motion.vmot", "tokens.txt", "poses.vp2d"].iter().all(|f| {
        std::fs::read(p.root.join("gen_a").join(f)).unwrap()
            == std::fs::read(p.root.join("gen_b").join(f)).unwrap()
    });
    let (ids, _) = read_tokens(&p.root.join("gen_a/tokens.txt")).unwrap();
    let slowest = times.iter().max().copied().unwrap_or_default();
    outcome(
        same && slowest < GENERATE_RUNTIME_MAX && ids.len() == 50,
        format!(
            "two runs byte-identical {same}; 10 s of audio to {} tokens in {:.1} s (< 60 s) end to end",
            ids.len(),
            slowest.as_secs_f64()
        ),
    )
}

/// Extra pinned check on the staged run: a prompt naming a motion family moves
/// the token histogram away from the default prompt's.
fn prompt_sensitivity(p: &Pipeline) -> Outcome {
    let wav = p.root.join("ten_seconds.wav");
    let k = p.ckpt();
    let out = p.root.join("gen_prompt");
    if let Err(e) = versa(&[
        "generate",
        "--audio",
        wav.to_str().unwrap(),
        "--text",
        "a person waves the right hand",
        "--ckpt",
        k.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]) {
        return outcome(false, e);
    }
    let (default_ids, _) = read_tokens(&p.root.join("gen_a/tokens.txt")).unwrap();
    let (prompt_ids, k) = read_tokens(&out.join("tokens.txt")).unwrap();
    let js = js_divergence(
        &token_histogram(&default_ids, k),
        &token_histogram(&prompt_ids, k),
    );
    outcome(
        js > PROMPT_JS_MIN,
        format!("token histogram JS divergence vs default prompt {js:.3} (> {PROMPT_JS_MIN})"),
    )
}

// Reporting ------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

fn report(label: &str, title: &str, o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("{label} {tag}  {title}: {}", o.detail);
}

fn criterion(n: usize) -> String {
    format!("criterion {n:>2}")
}

fn main() -> ExitCode {
    let quick = std::env::var_os("VERSA_ACCEPTANCE_QUICK").is_some();
    let mut failed = 0;
    let mut record = |label: String, title: &str, o: Outcome| {
        report(&label, title, &o);
        failed += usize::from(!o.pass);
    };
    record(
        criterion(1),
        "quantization oracle",
        guarded(quantization_oracle),
    );
    record(
        criterion(2),
        "gradient integrity",
        guarded(gradient_integrity),
    );
    record(criterion(3), "loss anchors", guarded(loss_anchors));
    record(criterion(7), "fusion identity", guarded(fusion_identity));
    record(
        criterion(8),
        "metrics self-consistency",
        guarded(metrics_consistency),
    );

    let staged: [StagedCheck; 6] = [
        (
            criterion(4),
            "tokenizer desk-scale training",
            tokenizer_training,
        ),
        (criterion(5), "text-stage learning", text_stage_learning),
        (criterion(6), "audio-stage learning", audio_stage_learning),
        (criterion(9), "token to pose", token_to_pose),
        (
            criterion(10),
            "end-to-end determinism and speed",
            end_to_end,
        ),
        (
            "pinned check".into(),
            "prompt sensitivity",
            prompt_sensitivity,
        ),
    ];
    if quick {
        for (label, title, _) in staged {
            println!("{label} SKIP  {title}: VERSA_ACCEPTANCE_QUICK is set");
        }
    } else {
        let p = run_pipeline();
        for (label, title, f) in staged {
            let o = match &p.failure {
                Some(e) => outcome(false, format!("staged run failed: {e}")),
                None => guarded(|| f(&p)),
            };
            record(label, title, o);
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance checks failed");
        ExitCode::FAILURE
    }
}
