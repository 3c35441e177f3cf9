//! Joint sequences, the 263-channel per-frame feature layout and 6D rotations.
//!
//! Channel layout of one feature frame:
//!
//! | range     | width | content                                              |
//! |-----------|-------|------------------------------------------------------|
//! | 0         | 1     | root yaw velocity (rad/s)                            |
//! | 1..3      | 2     | root x/z velocity in the facing frame (m/s)          |
//! | 3         | 1     | root height minus rest height (m)                    |
//! | 4..67     | 63    | joints 1..21, root-relative facing-frame position minus rest |
//! | 67..193   | 126   | joints 1..21, bone rotation in 6D                    |
//! | 193..259  | 66    | all 22 joints, facing-frame velocity (m/s)           |
//! | 259..263  | 4     | foot contacts (left ankle, left toe, right ankle, right toe) |
//!
//! Positions are stored relative to the rest skeleton so the all-zero frame
//! decodes to the rest pose.

mod features;
mod format;
mod pose2d;
mod rotation;
pub mod skeleton;

pub use features::{features_from_joints, joints_from_features};
pub use format::{
    motion_from_bytes, motion_from_text, motion_to_bytes, motion_to_text, read_motion,
    read_motion_binary, read_motion_text, write_motion_binary, write_motion_text,
};
pub use pose2d::{
    project_pose, project_sequence, PoseSequence2D, BONES_2D, FRAME_WIDTH_2D, NUM_JOINTS_2D,
    PARENTS_2D, ROOT_2D,
};
pub use rotation::{matrix_from_rot6d, rot6d_from_matrix, Rotation6D};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const NUM_JOINTS: usize = 22;
pub const FEATURE_DIM: usize = 263;
pub const DEFAULT_FPS: u32 = 20;

pub const ROOT_ROT_VEL: usize = 0;
pub const ROOT_LIN_VEL: usize = 1;
pub const ROOT_HEIGHT: usize = 3;
pub const LOCAL_POS: usize = 4;
pub const LOCAL_ROT: usize = LOCAL_POS + 21 * 3;
pub const JOINT_VEL: usize = LOCAL_ROT + 21 * 6;
pub const FOOT_CONTACT: usize = JOINT_VEL + NUM_JOINTS * 3;

const _: () = assert!(FOOT_CONTACT + 4 == FEATURE_DIM);

/// One skeleton pose: 22 joint positions in metres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose3D {
    pub joints: [[f32; 3]; NUM_JOINTS],
}

impl Pose3D {
    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }
}

/// `T × 263` feature frames at a fixed frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    fps: u32,
    data: Vec<f32>,
}

impl MotionSequence {
    pub fn new(data: Vec<f32>, fps: u32) -> Result<Self> {
        if !data.len().is_multiple_of(FEATURE_DIM) {
            return Err(Error::InvalidInput(format!(
                "{} values is not a whole number of {FEATURE_DIM}-wide frames",
                data.len()
            )));
        }
        if fps == 0 {
            return Err(Error::InvalidInput("fps must be positive".into()));
        }
        Ok(Self { fps, data })
    }

    pub fn zeros(frames: usize, fps: u32) -> Self {
        Self {
            fps,
            data: vec![0.0; frames * FEATURE_DIM],
        }
    }

    pub fn from_tensor(t: &Tensor, fps: u32) -> Result<Self> {
        if t.last_dim() != FEATURE_DIM {
            return Err(Error::InvalidInput(format!(
                "feature width {} is not {FEATURE_DIM}",
                t.last_dim()
            )));
        }
        Self::new(t.data().to_vec(), fps)
    }

    /// `[T, 263]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.num_frames(), FEATURE_DIM], self.data.clone())
            .expect("length checked on construction")
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / FEATURE_DIM
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * FEATURE_DIM..(t + 1) * FEATURE_DIM]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * FEATURE_DIM..(t + 1) * FEATURE_DIM]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Frames `start..start+len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.num_frames() {
            return Err(Error::InsufficientLength {
                needed: start + len,
                got: self.num_frames(),
            });
        }
        Ok(Self {
            fps: self.fps,
            data: self.data[start * FEATURE_DIM..(start + len) * FEATURE_DIM].to_vec(),
        })
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.fps != other.fps {
            return Err(Error::InvalidInput("frame rates differ".into()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            fps: self.fps,
            data,
        })
    }
}
