//! 18-joint 2D body poses in normalized image coordinates, and the orthographic
//! front-view projection from the 3D skeleton.
//!
//! Joint order: nose, neck, right shoulder/elbow/wrist, left shoulder/elbow/wrist,
//! right hip/knee/ankle, left hip/knee/ankle, right eye, left eye, right ear,
//! left ear. `u` grows to the right of the image, `v` grows downward.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use super::features::facing_yaw;
use super::rotation::yaw_matrix;
use super::skeleton as sk;
use super::Pose3D;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const NUM_JOINTS_2D: usize = 18;
pub const FRAME_WIDTH_2D: usize = NUM_JOINTS_2D * 2;
/// The neck anchors the 2D bone graph.
pub const ROOT_2D: usize = 1;

pub const PARENTS_2D: [Option<usize>; NUM_JOINTS_2D] = [
    Some(1),
    None,
    Some(1),
    Some(2),
    Some(3),
    Some(1),
    Some(5),
    Some(6),
    Some(1),
    Some(8),
    Some(9),
    Some(1),
    Some(11),
    Some(12),
    Some(0),
    Some(0),
    Some(14),
    Some(15),
];

/// `(parent, child)` pairs ordered so every parent is placed before its child.
pub const BONES_2D: [(usize, usize); NUM_JOINTS_2D - 1] = [
    (1, 0),
    (1, 2),
    (1, 5),
    (1, 8),
    (1, 11),
    (0, 14),
    (0, 15),
    (2, 3),
    (5, 6),
    (8, 9),
    (11, 12),
    (14, 16),
    (15, 17),
    (3, 4),
    (6, 7),
    (9, 10),
    (12, 13),
];

/// Metres of world space spanned by the unit image square.
const VIEW_SPAN: f64 = 2.4;
/// World height mapped to the image's vertical centre.
const VIEW_CENTRE_Y: f64 = 0.9;

/// Face landmarks relative to the head joint in the body's facing frame.
const NOSE_OFFSET: [f64; 3] = [0.0, -0.02, 0.10];
const R_EYE_OFFSET: [f64; 3] = [-0.035, 0.03, 0.09];
const L_EYE_OFFSET: [f64; 3] = [0.035, 0.03, 0.09];
const R_EAR_OFFSET: [f64; 3] = [-0.08, 0.0, 0.0];
const L_EAR_OFFSET: [f64; 3] = [0.08, 0.0, 0.0];

/// `T × 18 × 2` coordinates, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence2D {
    data: Vec<f32>,
}

impl PoseSequence2D {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if !data.len().is_multiple_of(FRAME_WIDTH_2D) {
            return Err(Error::InvalidInput(format!(
                "{} values is not a whole number of {FRAME_WIDTH_2D}-wide frames",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "2D pose has non-finite coordinates".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn empty() -> Self {
        Self { data: Vec::new() }
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / FRAME_WIDTH_2D
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * FRAME_WIDTH_2D..(t + 1) * FRAME_WIDTH_2D]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * FRAME_WIDTH_2D..(t + 1) * FRAME_WIDTH_2D]
    }

    pub fn joint(&self, t: usize, j: usize) -> [f32; 2] {
        let f = self.frame(t);
        [f[2 * j], f[2 * j + 1]]
    }

    pub fn push_frame(&mut self, frame: &[f32]) {
        assert_eq!(frame.len(), FRAME_WIDTH_2D);
        self.data.extend_from_slice(frame);
    }

    pub fn extend(&mut self, other: &PoseSequence2D) {
        self.data.extend_from_slice(&other.data);
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.num_frames() {
            return Err(Error::InsufficientLength {
                needed: start + len,
                got: self.num_frames(),
            });
        }
        Ok(Self {
            data: self.data[start * FRAME_WIDTH_2D..(start + len) * FRAME_WIDTH_2D].to_vec(),
        })
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn in_unit_square(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Largest per-joint displacement between frames `a` and `b`.
    pub fn max_joint_displacement(&self, a: usize, b: usize) -> f32 {
        let (fa, fb) = (self.frame(a), self.frame(b));
        (0..NUM_JOINTS_2D)
            .map(|j| {
                let dx = fa[2 * j] - fb[2 * j];
                let dy = fa[2 * j + 1] - fb[2 * j + 1];
                (dx * dx + dy * dy).sqrt()
            })
            .fold(0.0, f32::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "VP2D1 T={} J={NUM_JOINTS_2D}", self.num_frames());
        for t in 0..self.num_frames() {
            for (i, v) in self.frame(t).iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let parse_err = |line: usize, msg: String| Error::Parse { line, msg };
        let mut toks = header.split_whitespace();
        if toks.next() != Some("VP2D1") {
            return Err(parse_err(1, "expected VP2D1 header".into()));
        }
        let field = |tok: Option<&str>, key: &str| -> Result<usize> {
            tok.and_then(|t| t.strip_prefix(key))
                .and_then(|t| t.strip_prefix('='))
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| parse_err(1, format!("expected {key}=<int>")))
        };
        let frames = field(toks.next(), "T")?;
        let joints = field(toks.next(), "J")?;
        if joints != NUM_JOINTS_2D {
            return Err(parse_err(
                1,
                format!("joint count {joints} is not {NUM_JOINTS_2D}"),
            ));
        }
        let mut data = Vec::with_capacity(frames * FRAME_WIDTH_2D);
        let mut seen = 0;
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(
                    tok.parse::<f32>()
                        .map_err(|_| parse_err(i + 2, format!("not a number: {tok:?}")))?,
                );
            }
            if data.len() - before != FRAME_WIDTH_2D {
                return Err(parse_err(
                    i + 2,
                    format!(
                        "expected {FRAME_WIDTH_2D} values, found {}",
                        data.len() - before
                    ),
                ));
            }
            seen += 1;
        }
        if seen != frames {
            return Err(parse_err(
                seen + 1,
                format!("header declares {frames} frames, found {seen}"),
            ));
        }
        Self::new(data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn to_image(p: Vector3<f64>, centre_x: f64) -> [f32; 2] {
    let u = 0.5 + (p.x - centre_x) / VIEW_SPAN;
    let v = 0.5 - (p.y - VIEW_CENTRE_Y) / VIEW_SPAN;
    [u.clamp(0.0, 1.0) as f32, v.clamp(0.0, 1.0) as f32]
}

/// Orthographic front view of one pose, horizontally centred on `centre_x`.
/// Face landmarks are placed from the head joint using the body's heading.
pub fn project_pose(pose: &Pose3D, centre_x: f64) -> [f32; FRAME_WIDTH_2D] {
    let p = |j: usize| {
        let q = pose.joints[j];
        Vector3::new(q[0] as f64, q[1] as f64, q[2] as f64)
    };
    let face = yaw_matrix(facing_yaw(pose));
    let head = p(sk::HEAD);
    let landmark = |off: [f64; 3]| head + face * Vector3::from(off);
    let world = [
        landmark(NOSE_OFFSET),
        p(sk::NECK),
        p(sk::R_SHOULDER),
        p(sk::R_ELBOW),
        p(sk::R_WRIST),
        p(sk::L_SHOULDER),
        p(sk::L_ELBOW),
        p(sk::L_WRIST),
        p(sk::R_HIP),
        p(sk::R_KNEE),
        p(sk::R_ANKLE),
        p(sk::L_HIP),
        p(sk::L_KNEE),
        p(sk::L_ANKLE),
        landmark(R_EYE_OFFSET),
        landmark(L_EYE_OFFSET),
        landmark(R_EAR_OFFSET),
        landmark(L_EAR_OFFSET),
    ];
    let mut out = [0.0f32; FRAME_WIDTH_2D];
    for (j, w) in world.iter().enumerate() {
        let [u, v] = to_image(*w, centre_x);
        out[2 * j] = u;
        out[2 * j + 1] = v;
    }
    out
}

/// Project a sequence, centred on the first frame's pelvis.
pub fn project_sequence(poses: &[Pose3D]) -> PoseSequence2D {
    let centre_x = poses
        .first()
        .map_or(0.0, |p| p.joints[sk::PELVIS][0] as f64);
    let mut data = Vec::with_capacity(poses.len() * FRAME_WIDTH_2D);
    for pose in poses {
        data.extend_from_slice(&project_pose(pose, centre_x));
    }
    PoseSequence2D { data }
}
