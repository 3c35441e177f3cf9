//! Relation bank from motion tokens to recorded 2D pose snippets, translation
//! of token sequences into continuous 2D poses, and skeleton retargeting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::motion::{
    joints_from_features, project_sequence, MotionSequence, PoseSequence2D, BONES_2D,
    FRAME_WIDTH_2D, ROOT_2D,
};
use crate::rng::stream_rng;
use crate::vq::VqModel;

pub const BANK_FORMAT: &str = "versa-bank-1";
/// Frames over which the offset at a snippet seam is blended out.
pub const SEAM_FADE_FRAMES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Snippet {
    pub poses: PoseSequence2D,
    /// Template the snippet was cut from.
    pub template: String,
    /// Token position within that template.
    pub window: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationBank {
    snippet_len: usize,
    entries: BTreeMap<usize, Vec<Snippet>>,
}

/// A motion clip with its 2D pose track, frame-aligned.
#[derive(Clone, Debug)]
pub struct Template {
    pub id: String,
    pub motion: MotionSequence,
    pub poses: PoseSequence2D,
}

impl RelationBank {
    pub fn new(snippet_len: usize) -> Self {
        Self {
            snippet_len,
            entries: BTreeMap::new(),
        }
    }

    /// Tokenize every template and file its 2D frames under each token.
    pub fn build(templates: &[Template], vq: &VqModel) -> Result<Self> {
        let mut bank = Self::new(vq.downsample());
        bank.ingest(templates, vq)?;
        Ok(bank)
    }

    pub fn ingest(&mut self, templates: &[Template], vq: &VqModel) -> Result<()> {
        let l = self.snippet_len;
        if vq.downsample() != l {
            return Err(Error::Compatibility(format!(
                "bank holds {l}-frame snippets, tokenizer downsamples by {}",
                vq.downsample()
            )));
        }
        for t in templates {
            if t.poses.num_frames() != t.motion.num_frames() {
                return Err(Error::Alignment(format!(
                    "template `{}`: {} pose frames for {} motion frames",
                    t.id,
                    t.poses.num_frames(),
                    t.motion.num_frames()
                )));
            }
        }
        let motions: Vec<MotionSequence> = templates.iter().map(|t| t.motion.clone()).collect();
        let ids = vq.tokenize_many(&motions)?;
        for (t, ids) in templates.iter().zip(ids) {
            for (i, id) in ids.into_iter().enumerate() {
                if (i + 1) * l > t.poses.num_frames() {
                    break;
                }
                let poses = t.poses.slice(i * l, l)?;
                let list = self.entries.entry(id).or_default();
                if !list.iter().any(|s| s.poses == poses) {
                    list.push(Snippet {
                        poses,
                        template: t.id.clone(),
                        window: i,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn snippet_len(&self) -> usize {
        self.snippet_len
    }

    pub fn snippets(&self, id: usize) -> &[Snippet] {
        self.entries.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn token_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn num_snippets(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    /// `<stem>.json` index plus `<stem>.bin` little-endian `f32` snippet frames.
    pub fn save(&self, stem: &Path, tokenizer_hash: &str) -> Result<()> {
        let mut blob = Vec::new();
        let mut index = Vec::new();
        for (&token, list) in &self.entries {
            for s in list {
                index.push(IndexEntry {
                    token,
                    template: s.template.clone(),
                    window: s.window,
                    offset: blob.len(),
                });
                for v in s.poses.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = BankIndex {
            format: BANK_FORMAT.into(),
            snippet_len: self.snippet_len,
            tokenizer_hash: tokenizer_hash.into(),
            snippets: index,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        write_atomic(&bin_path(stem), &blob)?;
        write_atomic(&json_path(stem), &json)
    }

    /// The bank and the tokenizer hash it was built with.
    pub fn load(stem: &Path) -> Result<(Self, String)> {
        let index: BankIndex = serde_json::from_slice(&std::fs::read(json_path(stem))?)?;
        if index.format != BANK_FORMAT {
            return Err(Error::Compatibility(format!(
                "unknown bank format `{}`",
                index.format
            )));
        }
        let blob = std::fs::read(bin_path(stem))?;
        let width = index.snippet_len * FRAME_WIDTH_2D * 4;
        let mut bank = Self::new(index.snippet_len);
        for e in index.snippets {
            let bytes = blob.get(e.offset..e.offset + width).ok_or_else(|| {
                Error::Consistency(format!("snippet at byte {} runs past the blob", e.offset))
            })?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            bank.entries.entry(e.token).or_default().push(Snippet {
                poses: PoseSequence2D::new(data)?,
                template: e.template,
                window: e.window,
            });
        }
        Ok((bank, index.tokenizer_hash))
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    token: usize,
    template: String,
    window: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct BankIndex {
    format: String,
    snippet_len: usize,
    tokenizer_hash: String,
    snippets: Vec<IndexEntry>,
}

fn json_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

fn bin_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

/// Decode one code through the tokenizer, reconstruct joints and project them
/// into the unit square.
pub fn fallback_project(id: usize, vq: &VqModel, fps: u32) -> Result<PoseSequence2D> {
    let motion = vq.decode_tokens(&[id], fps)?;
    let mut poses = project_sequence(&joints_from_features(&motion)?);
    poses.clamp_unit();
    Ok(poses)
}

/// Largest per-joint Euclidean distance between two frames, the same measure
/// as a seam jump.
fn frame_distance(a: &[f32], b: &[f32]) -> f32 {
    a.chunks_exact(2)
        .zip(b.chunks_exact(2))
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .fold(0.0, f32::max)
}

/// Realise token ids as 2D poses: per token pick the stored snippet whose
/// first frame is nearest to the last emitted frame by the largest joint
/// distance (the first token picks uniformly with a seeded generator), fall
/// back to decoding the code for ids missing from the bank, and blend out the
/// offset at every seam.
pub fn translate_tokens(
    ids: &[usize],
    bank: &RelationBank,
    vq: &VqModel,
    fps: u32,
    seed: u64,
) -> Result<PoseSequence2D> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("no tokens to translate".into()));
    }
    let mut rng = stream_rng(seed, "token2pose.translate");
    let mut out = PoseSequence2D::empty();
    let mut fallbacks: BTreeMap<usize, PoseSequence2D> = BTreeMap::new();
    for &id in ids {
        let candidates = bank.snippets(id);
        let chosen = if candidates.is_empty() {
            if let std::collections::btree_map::Entry::Vacant(e) = fallbacks.entry(id) {
                e.insert(fallback_project(id, vq, fps)?);
            }
            fallbacks[&id].clone()
        } else if out.is_empty() {
            candidates[rng.random_range(0..candidates.len())]
                .poses
                .clone()
        } else {
            let last = out.frame(out.num_frames() - 1).to_vec();
            let mut best = 0;
            let mut best_d = f32::INFINITY;
            for (i, s) in candidates.iter().enumerate() {
                let d = frame_distance(s.poses.frame(0), &last);
                if d < best_d {
                    best = i;
                    best_d = d;
                }
            }
            candidates[best].poses.clone()
        };
        append_with_seam_fade(&mut out, chosen);
    }
    Ok(out)
}

/// Append `next`, shifting its first frames towards the previous frame by
/// `(F − k) / (F + 1)` of the seam offset for frame `k < F`.
fn append_with_seam_fade(out: &mut PoseSequence2D, mut next: PoseSequence2D) {
    if !out.is_empty() && !next.is_empty() {
        let last = out.frame(out.num_frames() - 1).to_vec();
        let offset: Vec<f32> = last.iter().zip(next.frame(0)).map(|(a, b)| a - b).collect();
        for k in 0..SEAM_FADE_FRAMES.min(next.num_frames()) {
            let w = (SEAM_FADE_FRAMES - k) as f32 / (SEAM_FADE_FRAMES + 1) as f32;
            for (v, o) in next.frame_mut(k).iter_mut().zip(&offset) {
                *v += w * o;
            }
        }
        next.clamp_unit();
    }
    out.extend(&next);
}

/// Target bone lengths (in `BONES_2D` order) and the position the first
/// frame's root is moved to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSkeleton {
    pub bone_lengths: Vec<f32>,
    pub anchor: [f32; 2],
}

impl TargetSkeleton {
    pub fn new(bone_lengths: Vec<f32>, anchor: [f32; 2]) -> Result<Self> {
        if bone_lengths.len() != BONES_2D.len() {
            return Err(Error::InvalidInput(format!(
                "{} bone lengths for {} bones",
                bone_lengths.len(),
                BONES_2D.len()
            )));
        }
        if bone_lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidInput("bone lengths must be positive".into()));
        }
        Ok(Self {
            bone_lengths,
            anchor,
        })
    }

    /// Bone lengths and root of frame `t` of `seq`.
    pub fn from_frame(seq: &PoseSequence2D, t: usize) -> Result<Self> {
        let lengths = BONES_2D
            .iter()
            .map(|&(p, c)| {
                let (a, b) = (seq.joint(t, p), seq.joint(t, c));
                ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
            })
            .collect();
        Self::new(lengths, seq.joint(t, ROOT_2D))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: TargetSkeleton = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::new(t.bone_lengths, t.anchor)
    }
}

/// Rebuild every frame from the root outward with the target's bone lengths and
/// the source's bone directions; the whole sequence is shifted so the first
/// frame's root lands on the anchor, keeping the root's own travel.
pub fn retarget(seq: &PoseSequence2D, target: &TargetSkeleton) -> Result<PoseSequence2D> {
    if seq.is_empty() {
        return Ok(PoseSequence2D::empty());
    }
    let root0 = seq.joint(0, ROOT_2D);
    let shift = [
        target.anchor[0] as f64 - root0[0] as f64,
        target.anchor[1] as f64 - root0[1] as f64,
    ];
    let mut out = Vec::with_capacity(seq.data().len());
    for t in 0..seq.num_frames() {
        let mut frame = [[0.0f64; 2]; FRAME_WIDTH_2D / 2];
        let r = seq.joint(t, ROOT_2D);
        frame[ROOT_2D] = [r[0] as f64 + shift[0], r[1] as f64 + shift[1]];
        for (b, &(p, c)) in BONES_2D.iter().enumerate() {
            let (a, z) = (seq.joint(t, p), seq.joint(t, c));
            let d = [z[0] as f64 - a[0] as f64, z[1] as f64 - a[1] as f64];
            let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if len == 0.0 {
                return Err(Error::Degenerate(format!(
                    "bone {p}→{c} has zero length in frame {t}"
                )));
            }
            let s = target.bone_lengths[b] as f64 / len;
            frame[c] = [frame[p][0] + d[0] * s, frame[p][1] + d[1] * s];
        }
        out.extend(frame.iter().flat_map(|j| [j[0] as f32, j[1] as f32]));
    }
    PoseSequence2D::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::VqConfig;
    use crate::motion::{DEFAULT_FPS, FEATURE_DIM};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_vq(seed: u64) -> VqModel {
        let cfg = VqConfig {
            codebook_size: 8,
            code_dim: 4,
            hidden: 6,
            ..VqConfig::default()
        };
        VqModel::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn template(id: &str, frames: usize, seed: u64) -> Template {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let motion = MotionSequence::new(
            (0..frames * FEATURE_DIM)
                .map(|_| rng.random_range(-0.5..0.5))
                .collect(),
            DEFAULT_FPS,
        )
        .unwrap();
        let poses = PoseSequence2D::new(
            (0..frames * FRAME_WIDTH_2D)
                .map(|_| rng.random_range(0.2..0.8))
                .collect(),
        )
        .unwrap();
        Template {
            id: id.into(),
            motion,
            poses,
        }
    }

    #[test]
    fn one_template_gives_sixteen_snippets() {
        let vq = tiny_vq(0);
        let t = template("a", 64, 1);
        let bank = RelationBank::build(std::slice::from_ref(&t), &vq).unwrap();
        assert_eq!(bank.num_snippets(), 16);
        assert!(bank.token_ids().count() <= 16);
        for id in bank.token_ids() {
            for s in bank.snippets(id) {
                assert_eq!(s.poses.num_frames(), 4);
                assert_eq!(s.poses, t.poses.slice(s.window * 4, 4).unwrap());
            }
        }
        let mut again = bank.clone();
        again.ingest(&[t], &vq).unwrap();
        assert_eq!(again, bank);
    }

    #[test]
    fn misaligned_template_rejected() {
        let vq = tiny_vq(0);
        let mut t = template("a", 64, 1);
        t.poses = t.poses.slice(0, 60).unwrap();
        assert!(matches!(
            RelationBank::build(&[t], &vq),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn bank_roundtrip() {
        let vq = tiny_vq(2);
        let bank = RelationBank::build(&[template("a", 64, 1), template("b", 32, 2)], &vq).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bank");
        bank.save(&stem, "h").unwrap();
        let (back, hash) = RelationBank::load(&stem).unwrap();
        assert_eq!(back, bank);
        assert_eq!(hash, "h");
    }

    #[test]
    fn single_snippet_returned_verbatim() {
        let vq = tiny_vq(0);
        let t = template("a", 4, 3);
        let bank = RelationBank::build(std::slice::from_ref(&t), &vq).unwrap();
        let id = bank.token_ids().next().unwrap();
        let out = translate_tokens(&[id], &bank, &vq, 20, 0).unwrap();
        assert_eq!(out, t.poses);
    }

    #[test]
    fn translation_length_and_fallback() {
        let vq = tiny_vq(1);
        let bank = RelationBank::new(4);
        let ids = [0, 5, 7, 5];
        let out = translate_tokens(&ids, &bank, &vq, 20, 0).unwrap();
        assert_eq!(out.num_frames(), 16);
        assert!(out.in_unit_square());
        assert!(translate_tokens(&[], &bank, &vq, 20, 0).is_err());
        for id in 0..8 {
            let p = fallback_project(id, &vq, 20).unwrap();
            assert_eq!(p.num_frames(), 4);
            assert!(p.in_unit_square());
        }
    }

    #[test]
    fn fallback_matches_decode_then_project() {
        let vq = tiny_vq(4);
        for id in 0..8 {
            let motion = vq.decode_tokens(&[id], 20).unwrap();
            let mut want = project_sequence(&joints_from_features(&motion).unwrap());
            want.clamp_unit();
            assert_eq!(fallback_project(id, &vq, 20).unwrap(), want);
        }
    }

    #[test]
    fn repeated_token_seams_are_no_larger_than_snippet_steps() {
        let vq = tiny_vq(0);
        let t = template("a", 4, 9);
        let bank = RelationBank::build(std::slice::from_ref(&t), &vq).unwrap();
        let id = bank.token_ids().next().unwrap();
        let intra = (0..3)
            .map(|i| t.poses.max_joint_displacement(i, i + 1))
            .fold(0.0, f32::max);
        let out = translate_tokens(&[id, id, id], &bank, &vq, 20, 0).unwrap();
        for seam in [3, 7] {
            assert!(out.max_joint_displacement(seam, seam + 1) <= intra + 1e-6);
        }
    }

    #[test]
    fn snippet_choice_bounds_seams_per_joint() {
        // `whole` moves every joint by (0.01, 0.01) per frame; `one` rests where `whole`
        // ends except for a single joint 0.05 away. By summed squares `one`
        // is nearer to the end of `whole` than `whole`'s own start is.
        let frame = |shift: f32, joint0: f32| {
            let mut f = vec![0.4 + shift; FRAME_WIDTH_2D];
            f[0] += joint0;
            f
        };
        let whole: Vec<f32> = (0..4).flat_map(|t| frame(0.01 * t as f32, 0.0)).collect();
        let one: Vec<f32> = (0..4).flat_map(|_| frame(0.03, 0.05)).collect();
        let snippet = |data: Vec<f32>| Snippet {
            poses: PoseSequence2D::new(data).unwrap(),
            template: "t".into(),
            window: 0,
        };
        let whole = snippet(whole);
        let step = whole.poses.max_joint_displacement(0, 1);
        let mut bank = RelationBank::new(4);
        bank.entries.insert(0, vec![whole, snippet(one)]);
        let vq = tiny_vq(0);
        for seed in 0..16 {
            let out = translate_tokens(&[0, 0, 0], &bank, &vq, 20, seed).unwrap();
            for seam in [3, 7] {
                assert!(
                    out.max_joint_displacement(seam, seam + 1) <= step + 1e-6,
                    "seed {seed}"
                );
            }
        }
    }

    #[test]
    fn retarget_identity_and_scaling() {
        let t = template("a", 8, 5);
        let same = TargetSkeleton::from_frame(&t.poses, 0).unwrap();
        // Identity only holds for frame 0's bones; use a rigid sequence.
        let rigid = PoseSequence2D::new(t.poses.frame(0).repeat(3)).unwrap();
        let out = retarget(&rigid, &same).unwrap();
        for (a, b) in out.data().iter().zip(rigid.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let doubled = TargetSkeleton::new(
            same.bone_lengths.iter().map(|l| 2.0 * l).collect(),
            [0.0, 0.0],
        )
        .unwrap();
        let out = retarget(&t.poses, &doubled).unwrap();
        assert_eq!(out.joint(0, ROOT_2D), [0.0, 0.0]);
        for f in 0..out.num_frames() {
            for (b, &(p, c)) in BONES_2D.iter().enumerate() {
                let (a, z) = (out.joint(f, p), out.joint(f, c));
                let (sa, sz) = (t.poses.joint(f, p), t.poses.joint(f, c));
                let len = ((z[0] - a[0]).powi(2) + (z[1] - a[1]).powi(2)).sqrt();
                assert!((len - doubled.bone_lengths[b]).abs() < 1e-5);
                let ang = (z[1] - a[1]).atan2(z[0] - a[0]);
                let sang = (sz[1] - sa[1]).atan2(sz[0] - sa[0]);
                assert!((ang - sang).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_length_bone_is_degenerate() {
        let mut p = PoseSequence2D::new(vec![0.5; FRAME_WIDTH_2D]).unwrap();
        p.frame_mut(0)[0] = 0.4;
        let target = TargetSkeleton::new(vec![0.1; BONES_2D.len()], [0.5, 0.5]).unwrap();
        assert!(matches!(retarget(&p, &target), Err(Error::Degenerate(_))));
        assert!(TargetSkeleton::new(vec![0.0; BONES_2D.len()], [0.0, 0.0]).is_err());
    }
}
