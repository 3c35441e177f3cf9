use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;
use versa_core::conditioning::write_wav;
use versa_core::motion::skeleton::rest_pose;
use versa_core::motion::{project_sequence, write_motion_text, BONES_2D};
use versa_core::vq::read_tokens;
use versa_core::{MotionSequence, PoseSequence2D};

const TINY: &str = r#"{
  "seed": 11,
  "data": { "samples_per_family": 40 },
  "vq": { "codebook_size": 32, "code_dim": 16, "hidden": 32, "steps": 6, "batch_size": 4 },
  "generator": {
    "layers": 2, "heads": 2, "width": 32, "ff_width": 64, "audio_dim": 16,
    "batch_size": 4, "text_steps": 3, "audio_steps": 3
  },
  "eval": { "mmodality_samples": 4, "mmodality_pairs": 2 }
}"#;

fn versa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_versa"))
        .args(args)
        .env_remove("VERSA_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = versa(args);
    assert!(
        out.status.success(),
        "versa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Runs a failing command and returns its single stderr line.
fn fails(args: &[&str]) -> String {
    let out = versa(args);
    assert!(
        !out.status.success(),
        "versa {args:?} unexpectedly succeeded"
    );
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(
        err.trim_end().lines().count(),
        1,
        "stderr is not one line: {err}"
    );
    err.trim_end().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Trained {
    _dir: TempDir,
    root: PathBuf,
}

impl Trained {
    fn config(&self) -> PathBuf {
        self.root.join("tiny.json")
    }
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn ckpt(&self) -> PathBuf {
        self.root.join("ck")
    }
}

/// Tiny corpus with every stage trained for a handful of steps.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let t = Trained { _dir: dir, root };
        std::fs::write(t.config(), TINY).unwrap();
        let (c, d, k) = (t.config(), t.data(), t.ckpt());
        ok(&["-c", s(&c), "data-synth", "--out", s(&d)]);
        for stage in ["vqvae", "text", "audio"] {
            ok(&[
                "-c",
                s(&c),
                "train",
                stage,
                "--data",
                s(&d),
                "--ckpt",
                s(&k),
            ]);
        }
        ok(&["bank-build", "--data", s(&d), "--ckpt", s(&k)]);
        t
    })
}

#[test]
fn stages_out_of_order_are_rejected() {
    let dir = TempDir::new().unwrap();
    let ck = dir.path().join("ck");
    let err = fails(&["train", "audio", "--ckpt", s(&ck)]);
    assert!(err.starts_with("error[E_ORDERING]:"), "{err}");
    let err = fails(&["train", "text", "--ckpt", s(&ck)]);
    assert!(err.starts_with("error[E_ORDERING]:"), "{err}");
}

#[test]
fn usage_errors_are_one_line() {
    let err = fails(&["train", "everything"]);
    assert!(err.starts_with("error[E_USAGE]:"), "{err}");
    let err = fails(&["render"]);
    assert!(err.starts_with("error[E_USAGE]:"), "{err}");
}

#[test]
fn training_writes_logs_and_is_repeatable() {
    let t = trained();
    let k = t.ckpt();
    for stage in ["vqvae", "text", "audio"] {
        let csv = std::fs::read_to_string(k.join(format!("{stage}_loss.csv"))).unwrap();
        assert!(csv.starts_with("step,loss"));
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(k.join(format!("{stage}_run.json"))).unwrap())
                .unwrap();
        assert_eq!(manifest["stage"], stage);
        assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    }

    let again = TempDir::new().unwrap();
    let c = t.config();
    ok(&[
        "-c",
        s(&c),
        "train",
        "vqvae",
        "--data",
        s(&t.data()),
        "--ckpt",
        s(again.path()),
    ]);
    for ext in ["json", "bin"] {
        assert_eq!(
            std::fs::read(k.join(format!("vqvae.{ext}"))).unwrap(),
            std::fs::read(again.path().join(format!("vqvae.{ext}"))).unwrap()
        );
    }

    let mut other: serde_json::Value = serde_json::from_str(TINY).unwrap();
    other["seed"] = 12.into();
    let other_cfg = again.path().join("other.json");
    std::fs::write(&other_cfg, other.to_string()).unwrap();
    let err = fails(&[
        "-c",
        s(&other_cfg),
        "train",
        "text",
        "--data",
        s(&t.data()),
        "--ckpt",
        s(&k),
    ]);
    assert!(err.starts_with("error[E_COMPATIBILITY]:"), "{err}");
}

#[test]
fn generate_contract_and_determinism() {
    let t = trained();
    let dir = TempDir::new().unwrap();
    let wav = dir.path().join("silence.wav");
    // 2.1 s at 20 fps is 42 frames, so ceil(42 / 4) = 11 tokens.
    write_wav(&wav, &vec![0.0; 33_600]).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let k = t.ckpt();
    ok(&[
        "generate",
        "--audio",
        s(&wav),
        "--ckpt",
        s(&k),
        "--out",
        s(&a),
    ]);
    ok(&[
        "generate",
        "--audio",
        s(&wav),
        "--ckpt",
        s(&k),
        "--out",
        s(&b),
    ]);
    for f in ["motion.vmot", "tokens.txt", "poses.vp2d", "manifest.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let (ids, k_codes) = read_tokens(&a.join("tokens.txt")).unwrap();
    assert_eq!(ids.len(), 11);
    assert_eq!(k_codes, 32);
    let motion = versa_core::motion::read_motion(&a.join("motion.vmot")).unwrap();
    assert_eq!(motion.num_frames(), 44);
    let poses = PoseSequence2D::load(&a.join("poses.vp2d")).unwrap();
    assert_eq!(poses.num_frames(), 44);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["num_tokens"], 11);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let c = dir.path().join("c");
    ok(&[
        "generate",
        "--audio",
        s(&wav),
        "--text",
        "a person jumps",
        "--temperature",
        "1.0",
        "--seed",
        "5",
        "--ckpt",
        s(&k),
        "--out",
        s(&c),
    ]);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(c.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["prompt"], "a person jumps");

    let bad = dir.path().join("bad.wav");
    std::fs::write(&bad, b"RIFF garbage").unwrap();
    let err = fails(&[
        "generate",
        "--audio",
        s(&bad),
        "--ckpt",
        s(&k),
        "--out",
        s(&c),
    ]);
    assert!(err.starts_with("error[E_INPUT]:"), "{err}");

    let mut other: serde_json::Value = serde_json::from_str(TINY).unwrap();
    other["vq"]["codebook_size"] = 64.into();
    let other_cfg = dir.path().join("other.json");
    std::fs::write(&other_cfg, other.to_string()).unwrap();
    let err = fails(&[
        "-c",
        s(&other_cfg),
        "generate",
        "--audio",
        s(&wav),
        "--ckpt",
        s(&k),
        "--out",
        s(&c),
    ]);
    assert!(err.starts_with("error[E_COMPATIBILITY]:"), "{err}");
}

#[test]
fn translate_tokens_file() {
    let t = trained();
    let dir = TempDir::new().unwrap();
    let tokens = dir.path().join("t.txt");
    versa_core::vq::write_tokens(&tokens, &[0, 5, 5, 31, 2], 32).unwrap();
    let out = dir.path().join("p.vp2d");
    ok(&[
        "translate",
        "--tokens",
        s(&tokens),
        "--ckpt",
        s(&t.ckpt()),
        "--out",
        s(&out),
    ]);
    assert_eq!(PoseSequence2D::load(&out).unwrap().num_frames(), 20);

    versa_core::vq::write_tokens(&tokens, &[0, 5], 64).unwrap();
    let err = fails(&[
        "translate",
        "--tokens",
        s(&tokens),
        "--ckpt",
        s(&t.ckpt()),
        "--out",
        s(&out),
    ]);
    assert!(err.starts_with("error[E_COMPATIBILITY]:"), "{err}");
}

#[test]
fn evaluate_report_matches_schema() {
    let t = trained();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("report.json");
    ok(&[
        "evaluate",
        "--data",
        s(&t.data()),
        "--ckpt",
        s(&t.ckpt()),
        "--out",
        s(&out),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let schema_path =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/eval_report.schema.json");
    let schema: serde_json::Value =
        serde_json::from_slice(&std::fs::read(schema_path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator
        .iter_errors(&report)
        .map(|e| e.to_string())
        .collect();
    assert!(errors.is_empty(), "{errors:?}");

    let err = fails(&[
        "evaluate",
        "--data",
        s(&t.data()),
        "--ckpt",
        s(&t.ckpt()),
        "--out",
        s(&out),
        "--protocol",
        "other",
    ]);
    assert!(err.starts_with("error[E_PROTOCOL]:"), "{err}");

    let small = dir.path().join("small");
    let mut cfg: serde_json::Value = serde_json::from_str(TINY).unwrap();
    cfg["data"]["samples_per_family"] = 10.into();
    let small_cfg = dir.path().join("small.json");
    std::fs::write(&small_cfg, cfg.to_string()).unwrap();
    ok(&["-c", s(&small_cfg), "data-synth", "--out", s(&small)]);
    let err = fails(&[
        "evaluate",
        "--data",
        s(&small),
        "--ckpt",
        s(&t.ckpt()),
        "--out",
        s(&out),
    ]);
    assert!(err.starts_with("error[E_PROTOCOL]:"), "{err}");
}

fn svg_lines(svg: &str) -> Vec<[f32; 4]> {
    svg.lines()
        .filter(|l| l.starts_with("<line"))
        .map(|l| {
            let attr = |k: &str| -> f32 {
                let start = l.find(&format!("{k}=\"")).unwrap() + k.len() + 2;
                l[start..].split('"').next().unwrap().parse().unwrap()
            };
            [attr("x1"), attr("y1"), attr("x2"), attr("y2")]
        })
        .collect()
}

#[test]
fn render_one_svg_per_frame() {
    let dir = TempDir::new().unwrap();
    let rest = project_sequence(&vec![rest_pose(); 3]);
    let poses = dir.path().join("rest.vp2d");
    rest.save(&poses).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["render", s(&poses), "--out", s(&a)]);
    ok(&["render", s(&poses), "--out", s(&b)]);
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 3);
    for n in &names {
        assert_eq!(
            std::fs::read(a.join(n)).unwrap(),
            std::fs::read(b.join(n)).unwrap()
        );
    }

    let svg = std::fs::read_to_string(a.join("frame_00000.svg")).unwrap();
    assert!(svg.contains("viewBox=\"0 0 1 1\""));
    let lines = svg_lines(&svg);
    assert_eq!(lines.len(), BONES_2D.len());
    for (seg, &(p, c)) in lines.iter().zip(&BONES_2D) {
        let (u, v) = (rest.joint(0, p), rest.joint(0, c));
        let want = ((v[0] - u[0]).powi(2) + (v[1] - u[1]).powi(2)).sqrt();
        let got = ((seg[2] - seg[0]).powi(2) + (seg[3] - seg[1]).powi(2)).sqrt();
        assert!((got - want).abs() < 1e-5, "bone {p}-{c}: {got} vs {want}");
    }

    let motion = dir.path().join("still.vmot");
    write_motion_text(&motion, &MotionSequence::zeros(5, 20)).unwrap();
    let m = dir.path().join("m");
    ok(&["render", s(&motion), "--out", s(&m)]);
    assert_eq!(std::fs::read_dir(&m).unwrap().count(), 5);
}

#[test]
fn render_reports_parse_line() {
    let dir = TempDir::new().unwrap();
    let seq = project_sequence(&vec![rest_pose(); 2]);
    let mut text = seq.to_text();
    text = text.replacen("0.", "zz", 1);
    let bad = dir.path().join("bad.vp2d");
    std::fs::write(&bad, text).unwrap();
    let err = fails(&["render", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert!(err.starts_with("error[E_PARSE]:"), "{err}");
    assert!(err.contains("line 2"), "{err}");
}
