//! Synthetic paired corpus: parametric motion families with a text label each,
//! and an audio track whose loudness follows the motion's joint speed.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{read_wav, write_wav, SAMPLE_RATE};
use crate::config::{DataConfig, RunConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::motion::skeleton::{self as sk, forward_kinematics, rest_root_height};
use crate::motion::{
    features_from_joints, project_sequence, read_motion_text, write_motion_text, MotionSequence,
    Pose3D, PoseSequence2D, NUM_JOINTS,
};
use crate::rng::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Still,
    Wave,
    Walk,
    Jump,
    RaiseArms,
    Squat,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Still,
        Family::Wave,
        Family::Walk,
        Family::Jump,
        Family::RaiseArms,
        Family::Squat,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Family::Still => "a person stands still",
            Family::Wave => "a person waves the right hand",
            Family::Walk => "a person walks forward",
            Family::Jump => "a person jumps in place",
            Family::RaiseArms => "a person raises both arms",
            Family::Squat => "a person squats down",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Still => "still",
            Family::Wave => "wave",
            Family::Walk => "walk",
            Family::Jump => "jump",
            Family::RaiseArms => "raise_arms",
            Family::Squat => "squat",
        }
    }

    pub fn from_name(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == s)
    }
}

/// Per-sample jitter drawn from the sample seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleParams {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub heading: f64,
    pub arm_drop: f64,
}

impl SampleParams {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            amplitude: rng.random_range(0.85..1.15),
            frequency: rng.random_range(0.85..1.15),
            phase: rng.random_range(0.0..TAU),
            heading: rng.random_range(-0.3..0.3),
            arm_drop: rng.random_range(1.1..1.3),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub family: Family,
    pub label: String,
    pub seed: u64,
    pub joints: Vec<Pose3D>,
    pub motion: MotionSequence,
    pub audio: Vec<f32>,
}

impl Sample {
    /// 2D template aligned frame-for-frame with the feature sequence.
    pub fn pose2d(&self) -> PoseSequence2D {
        project_sequence(&self.joints[..self.motion.num_frames()])
    }
}

fn rot(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

/// Smooth 0 → 1 → 0 cycle.
fn pulse(x: f64) -> f64 {
    0.5 - 0.5 * x.cos()
}

/// Joint positions for `frames` frames of one family.
pub fn gen_joints(family: Family, p: &SampleParams, frames: usize, fps: u32) -> Vec<Pose3D> {
    let (x, z) = (Vector3::x(), Vector3::z());
    (0..frames)
        .map(|t| {
            let s = t as f64 / fps as f64;
            let mut local = [Matrix3::identity(); NUM_JOINTS];
            let mut root = Vector3::new(0.0, rest_root_height(), 0.0);
            let mut left_arm = -p.arm_drop;
            let mut right_arm = p.arm_drop;
            let a = p.amplitude;
            match family {
                Family::Still => {}
                Family::Wave => {
                    let w = TAU * 2.0 * p.frequency * s + p.phase;
                    right_arm = -0.4;
                    local[sk::R_ELBOW] = rot(z, -0.9 - 0.6 * a * w.sin());
                }
                Family::Walk => {
                    let w = TAU * 1.0 * p.frequency * s + p.phase;
                    let swing = 0.45 * a * w.sin();
                    local[sk::L_HIP] = rot(x, swing);
                    local[sk::R_HIP] = rot(x, -swing);
                    local[sk::L_KNEE] = rot(x, 0.6 * a * pulse(w).powi(2));
                    local[sk::R_KNEE] = rot(x, 0.6 * a * pulse(w + PI).powi(2));
                    local[sk::L_SHOULDER] = rot(x, -0.6 * swing);
                    local[sk::R_SHOULDER] = rot(x, 0.6 * swing);
                    root.z = 1.2 * a * s;
                    root.y -= 0.03 * (2.0 * w).cos().abs();
                }
                Family::Jump => {
                    let w = TAU * 1.1 * p.frequency * s + p.phase;
                    let lift = pulse(w);
                    root.y += 0.25 * a * lift;
                    let crouch = 0.7 * a * pulse(w + PI);
                    local[sk::L_HIP] = rot(x, -crouch);
                    local[sk::R_HIP] = rot(x, -crouch);
                    local[sk::L_KNEE] = rot(x, 2.0 * crouch);
                    local[sk::R_KNEE] = rot(x, 2.0 * crouch);
                    root.y -= 0.12 * crouch;
                    left_arm += 0.8 * lift;
                    right_arm -= 0.8 * lift;
                }
                Family::RaiseArms => {
                    let w = TAU * 0.7 * p.frequency * s + p.phase;
                    let up = (p.arm_drop + 1.3 * a) * pulse(w);
                    left_arm += up;
                    right_arm -= up;
                }
                Family::Squat => {
                    let w = TAU * 0.6 * p.frequency * s + p.phase;
                    let depth = 0.9 * a * pulse(w);
                    local[sk::L_HIP] = rot(x, -depth);
                    local[sk::R_HIP] = rot(x, -depth);
                    local[sk::L_KNEE] = rot(x, 1.8 * depth);
                    local[sk::R_KNEE] = rot(x, 1.8 * depth);
                    local[sk::SPINE1] = rot(x, 0.4 * depth);
                    root.y -= 0.35 * depth;
                }
            }
            if family != Family::Walk {
                local[sk::L_SHOULDER] = rot(z, left_arm);
                local[sk::R_SHOULDER] = rot(z, right_arm);
            } else {
                local[sk::L_SHOULDER] = rot(z, left_arm) * local[sk::L_SHOULDER];
                local[sk::R_SHOULDER] = rot(z, right_arm) * local[sk::R_SHOULDER];
            }
            let heading = Rotation3::from_axis_angle(&Vector3::y_axis(), p.heading);
            let root = heading * root;
            forward_kinematics(&local, p.heading, root)
        })
        .collect()
}

/// Per-frame motion energy: summed joint speed (m/s) after removing the root's
/// horizontal travel, smoothed with a 3-tap moving average. One value per
/// frame pair, so `joints.len() − 1` values.
pub fn motion_energy(joints: &[Pose3D], fps: u32) -> Vec<f64> {
    let raw: Vec<f64> = joints
        .windows(2)
        .map(|w| {
            let r = |p: &Pose3D, k| p.joints[sk::PELVIS][k] as f64;
            let root_dx = r(&w[1], 0) - r(&w[0], 0);
            let root_dz = r(&w[1], 2) - r(&w[0], 2);
            (0..NUM_JOINTS)
                .map(|j| {
                    let d = |k: usize| w[1].joints[j][k] as f64 - w[0].joints[j][k] as f64;
                    let v = Vector3::new(d(0) - root_dx, d(1), d(2) - root_dz);
                    v.norm() * fps as f64
                })
                .sum()
        })
        .collect();
    let n = raw.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            raw[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Loudness per unit of motion energy.
const AUDIO_GAIN: f64 = 0.02;
const NOISE_FLOOR: f64 = 1e-3;

/// Noise whose amplitude follows the motion-energy envelope, linearly
/// interpolated between frame centres.
pub fn synth_audio<R: Rng + ?Sized>(energy: &[f64], fps: u32, rng: &mut R) -> Vec<f32> {
    let per_frame = SAMPLE_RATE as f64 / fps as f64;
    let n = (energy.len() as f64 * per_frame).round() as usize;
    (0..n)
        .map(|i| {
            let pos = (i as f64 + 0.5) / per_frame - 0.5;
            let i0 = pos.floor().clamp(0.0, (energy.len() - 1) as f64) as usize;
            let i1 = (i0 + 1).min(energy.len() - 1);
            let w = (pos - i0 as f64).clamp(0.0, 1.0);
            let env = energy[i0] * (1.0 - w) + energy[i1] * w;
            let amp = AUDIO_GAIN * env + NOISE_FLOOR;
            let g: f64 = rng.sample(StandardNormal);
            (amp * g).clamp(-1.0, 1.0) as f32
        })
        .collect()
}

/// Root-mean-square of the audio over each motion frame.
pub fn audio_frame_rms(audio: &[f32], fps: u32, frames: usize) -> Vec<f64> {
    let per_frame = SAMPLE_RATE as usize / fps as usize;
    (0..frames)
        .map(|t| {
            let chunk =
                &audio[(t * per_frame).min(audio.len())..((t + 1) * per_frame).min(audio.len())];
            if chunk.is_empty() {
                return 0.0;
            }
            (chunk.iter().map(|&s| s as f64 * s as f64).sum::<f64>() / chunk.len() as f64).sqrt()
        })
        .collect()
}

pub fn sample_seed(corpus_seed: u64, family: Family, index: usize) -> u64 {
    crate::rng::fnv1a64(format!("{corpus_seed}/{}/{index}", family.name()).as_bytes())
}

/// One (motion, label, waveform) triple.
pub fn gen_sample(family: Family, index: usize, cfg: &DataConfig, seed: u64) -> Result<Sample> {
    let mut rng = stream_rng(seed, "datagen.sample");
    let params = SampleParams::draw(&mut rng);
    let joints = gen_joints(family, &params, cfg.joint_frames, cfg.fps);
    let motion = features_from_joints(&joints, cfg.fps)?;
    let energy = motion_energy(&joints, cfg.fps);
    let audio = synth_audio(&energy, cfg.fps, &mut rng);
    Ok(Sample {
        id: format!("{}_{index:03}", family.name()),
        family,
        label: family.label().to_string(),
        seed,
        joints,
        motion,
        audio,
    })
}

pub fn gen_corpus(cfg: &DataConfig, seed: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(Family::ALL.len() * cfg.samples_per_family);
    for family in Family::ALL {
        for i in 0..cfg.samples_per_family {
            out.push(gen_sample(family, i, cfg, sample_seed(seed, family, i))?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Seeded stratified split: within each family, shuffle and cut at the given
/// proportions (rounded), the remainder going to the last part.
pub fn split_corpus(families: &[Family], ratios: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::InvalidInput(format!(
            "split ratios {ratios:?} must be ≥ 0 and sum to 1"
        )));
    }
    let mut groups: BTreeMap<Family, Vec<usize>> = BTreeMap::new();
    for (i, f) in families.iter().enumerate() {
        groups.entry(*f).or_default().push(i);
    }
    let mut out = vec![Split::Train; families.len()];
    let mut rng = stream_rng(seed, "datagen.split");
    for (family, mut idx) in groups {
        if idx.len() < 3 {
            return Err(Error::Stratification(format!(
                "family `{}` has {} samples; at least 3 are needed",
                family.name(),
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let n_train = (ratios[0] * n).round() as usize;
        let n_val = ((ratios[1] * n).round() as usize).min(idx.len() - n_train);
        for (k, &i) in idx.iter().enumerate() {
            out[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub family: Family,
    pub label: String,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub config_hash: String,
    pub fps: u32,
    pub sample_rate: u32,
    pub samples: Vec<ManifestEntry>,
}

/// Samples in memory with their split assignment.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
}

impl Corpus {
    pub fn generate(run: &RunConfig) -> Result<Self> {
        let samples = gen_corpus(&run.data, run.seed)?;
        let fams: Vec<Family> = samples.iter().map(|s| s.family).collect();
        let splits = split_corpus(&fams, run.data.split, run.seed)?;
        Ok(Self { samples, splits })
    }

    pub fn part(&self, which: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(x, _)| x)
            .collect()
    }

    /// Write `<dir>/<family>/<id>.{vmot,vp2d,wav,txt}` and `<dir>/manifest.json`.
    pub fn save(&self, dir: &Path, run: &RunConfig) -> Result<CorpusManifest> {
        let mut entries = Vec::with_capacity(self.samples.len());
        for (s, split) in self.samples.iter().zip(&self.splits) {
            let sub = dir.join(s.family.name());
            write_motion_text(&sub.join(format!("{}.vmot", s.id)), &s.motion)?;
            s.pose2d().save(&sub.join(format!("{}.vp2d", s.id)))?;
            write_wav(&sub.join(format!("{}.wav", s.id)), &s.audio)?;
            write_atomic(
                &sub.join(format!("{}.txt", s.id)),
                format!("{}\n", s.label).as_bytes(),
            )?;
            entries.push(ManifestEntry {
                id: s.id.clone(),
                family: s.family,
                label: s.label.clone(),
                seed: s.seed,
                split: *split,
            });
        }
        let manifest = CorpusManifest {
            seed: run.seed,
            config_hash: run.hash(),
            fps: run.data.fps,
            sample_rate: SAMPLE_RATE,
            samples: entries,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        write_atomic(&dir.join("manifest.json"), &json)?;
        Ok(manifest)
    }
}

/// A corpus item read back from disk (joint trajectories are not stored).
#[derive(Clone, Debug)]
pub struct StoredSample {
    pub entry: ManifestEntry,
    pub motion: MotionSequence,
    pub poses: PoseSequence2D,
    pub audio: Vec<f32>,
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    Ok(serde_json::from_slice(&std::fs::read(
        dir.join("manifest.json"),
    )?)?)
}

pub fn load_split(dir: &Path, which: Option<Split>) -> Result<Vec<StoredSample>> {
    let manifest = load_manifest(dir)?;
    manifest
        .samples
        .into_iter()
        .filter(|e| which.is_none_or(|w| e.split == w))
        .map(|entry| {
            let sub = dir.join(entry.family.name());
            let motion = read_motion_text(&sub.join(format!("{}.vmot", entry.id)))?;
            let poses = PoseSequence2D::load(&sub.join(format!("{}.vp2d", entry.id)))?;
            let audio = read_wav(&sub.join(format!("{}.wav", entry.id)))?;
            Ok(StoredSample {
                entry,
                motion,
                poses,
                audio,
            })
        })
        .collect()
}

/// Pearson correlation of two equal-length series.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
