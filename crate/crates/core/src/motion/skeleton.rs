//! The fixed 22-joint body skeleton (y up, facing +z, character's left on +x).

use nalgebra::{Matrix3, Vector3};

use super::rotation::yaw_matrix;
use super::{Pose3D, NUM_JOINTS};

pub const PELVIS: usize = 0;
pub const L_HIP: usize = 1;
pub const R_HIP: usize = 2;
pub const SPINE1: usize = 3;
pub const L_KNEE: usize = 4;
pub const R_KNEE: usize = 5;
pub const SPINE2: usize = 6;
pub const L_ANKLE: usize = 7;
pub const R_ANKLE: usize = 8;
pub const SPINE3: usize = 9;
pub const L_FOOT: usize = 10;
pub const R_FOOT: usize = 11;
pub const NECK: usize = 12;
pub const L_COLLAR: usize = 13;
pub const R_COLLAR: usize = 14;
pub const HEAD: usize = 15;
pub const L_SHOULDER: usize = 16;
pub const R_SHOULDER: usize = 17;
pub const L_ELBOW: usize = 18;
pub const R_ELBOW: usize = 19;
pub const L_WRIST: usize = 20;
pub const R_WRIST: usize = 21;

/// Parent of every joint; the pelvis is the root.
pub const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(PELVIS),
    Some(PELVIS),
    Some(PELVIS),
    Some(L_HIP),
    Some(R_HIP),
    Some(SPINE1),
    Some(L_KNEE),
    Some(R_KNEE),
    Some(SPINE2),
    Some(L_ANKLE),
    Some(R_ANKLE),
    Some(SPINE3),
    Some(SPINE3),
    Some(SPINE3),
    Some(NECK),
    Some(L_COLLAR),
    Some(R_COLLAR),
    Some(L_SHOULDER),
    Some(R_SHOULDER),
    Some(L_ELBOW),
    Some(R_ELBOW),
];

/// Rest (T-pose) joint positions in metres, root at the origin in x/z.
pub const REST_POSITIONS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.93, 0.0],
    [0.09, 0.86, 0.0],
    [-0.09, 0.86, 0.0],
    [0.0, 1.05, -0.01],
    [0.10, 0.48, 0.0],
    [-0.10, 0.48, 0.0],
    [0.0, 1.18, -0.01],
    [0.10, 0.08, -0.02],
    [-0.10, 0.08, -0.02],
    [0.0, 1.24, 0.0],
    [0.10, 0.02, 0.11],
    [-0.10, 0.02, 0.11],
    [0.0, 1.45, 0.0],
    [0.07, 1.37, 0.0],
    [-0.07, 1.37, 0.0],
    [0.0, 1.58, 0.03],
    [0.17, 1.38, 0.0],
    [-0.17, 1.38, 0.0],
    [0.43, 1.38, 0.0],
    [-0.43, 1.38, 0.0],
    [0.68, 1.38, 0.0],
    [-0.68, 1.38, 0.0],
];

/// Foot joints used for contact flags: left ankle, left toe, right ankle, right toe.
pub const FOOT_JOINTS: [usize; 4] = [L_ANKLE, L_FOOT, R_ANKLE, R_FOOT];

pub fn rest_pose() -> Pose3D {
    let mut joints = [[0.0f32; 3]; NUM_JOINTS];
    for (j, p) in REST_POSITIONS.iter().enumerate() {
        joints[j] = [p[0] as f32, p[1] as f32, p[2] as f32];
    }
    Pose3D { joints }
}

pub fn rest_offset(j: usize) -> Vector3<f64> {
    let p = Vector3::from(REST_POSITIONS[j]);
    match PARENTS[j] {
        Some(parent) => p - Vector3::from(REST_POSITIONS[parent]),
        None => p,
    }
}

pub fn rest_root_height() -> f64 {
    REST_POSITIONS[PELVIS][1]
}

/// Forward kinematics from per-joint local rotations.
///
/// `local[j]` rotates joint `j`'s children in `j`'s frame; `root_yaw` and
/// `root_pos` place the pelvis in the world.
pub fn forward_kinematics(
    local: &[Matrix3<f64>; NUM_JOINTS],
    root_yaw: f64,
    root_pos: Vector3<f64>,
) -> Pose3D {
    let mut global_rot = [Matrix3::identity(); NUM_JOINTS];
    let mut pos = [Vector3::zeros(); NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        match PARENTS[j] {
            None => {
                global_rot[j] = yaw_matrix(root_yaw) * local[j];
                pos[j] = root_pos;
            }
            Some(p) => {
                global_rot[j] = global_rot[p] * local[j];
                pos[j] = pos[p] + global_rot[p] * rest_offset(j);
            }
        }
    }
    let mut joints = [[0.0f32; 3]; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        joints[j] = [pos[j].x as f32, pos[j].y as f32, pos[j].z as f32];
    }
    Pose3D { joints }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parents_precede_children() {
        for (j, p) in PARENTS.iter().enumerate() {
            if let Some(p) = p {
                assert!(*p < j);
            }
        }
    }

    #[test]
    fn identity_fk_reproduces_rest() {
        let local = [Matrix3::identity(); NUM_JOINTS];
        let pose = forward_kinematics(&local, 0.0, Vector3::from(REST_POSITIONS[0]));
        assert_eq!(pose, rest_pose());
    }
}
