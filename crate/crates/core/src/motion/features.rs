use nalgebra::{Matrix3, Vector3};

use super::rotation::{rot6d_from_matrix, rotation_between, yaw_matrix};
use super::skeleton::{
    rest_offset, rest_root_height, FOOT_JOINTS, L_HIP, L_SHOULDER, PARENTS, PELVIS, REST_POSITIONS,
    R_HIP, R_SHOULDER,
};
use super::{
    MotionSequence, Pose3D, FEATURE_DIM, FOOT_CONTACT, JOINT_VEL, LOCAL_POS, LOCAL_ROT, NUM_JOINTS,
    ROOT_HEIGHT, ROOT_LIN_VEL, ROOT_ROT_VEL,
};
use crate::error::{Error, Result};

/// Squared per-frame foot displacement below which a foot counts as planted,
/// scaled to (m/s)² at the sequence frame rate.
const CONTACT_DISP2: f64 = 0.002;

fn v3(p: &[f32; 3]) -> Vector3<f64> {
    Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
}

/// Heading of a pose: the horizontal direction perpendicular to the hip and
/// shoulder axes, as a yaw angle about +y (0 = facing +z).
pub(crate) fn facing_yaw(pose: &Pose3D) -> f64 {
    let across = (v3(&pose.joints[R_HIP]) - v3(&pose.joints[L_HIP]))
        + (v3(&pose.joints[R_SHOULDER]) - v3(&pose.joints[L_SHOULDER]));
    let fwd = Vector3::y().cross(&across);
    if fwd.x.abs() < 1e-12 && fwd.z.abs() < 1e-12 {
        return 0.0;
    }
    fwd.x.atan2(fwd.z)
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    }
    a
}

/// Per-frame features from a joint sequence. Produces `T − 1` frames: frame `t`
/// uses poses `t` and `t + 1` for its velocities.
pub fn features_from_joints(poses: &[Pose3D], fps: u32) -> Result<MotionSequence> {
    if fps == 0 {
        return Err(Error::InvalidInput("fps must be positive".into()));
    }
    if poses.len() < 2 {
        return Err(Error::InsufficientLength {
            needed: 2,
            got: poses.len(),
        });
    }
    if let Some(i) = poses.iter().position(|p| !p.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "pose {i} has non-finite joints"
        )));
    }
    let rate = fps as f64;
    let t_out = poses.len() - 1;
    let yaws: Vec<f64> = poses.iter().map(facing_yaw).collect();
    let mut data = vec![0.0f32; t_out * FEATURE_DIM];

    for t in 0..t_out {
        let (cur, next) = (&poses[t], &poses[t + 1]);
        let inv = yaw_matrix(-yaws[t]);
        let f = &mut data[t * FEATURE_DIM..(t + 1) * FEATURE_DIM];
        let root = v3(&cur.joints[PELVIS]);
        let root_next = v3(&next.joints[PELVIS]);

        f[ROOT_ROT_VEL] = (wrap_angle(yaws[t + 1] - yaws[t]) * rate) as f32;
        let mut dr = root_next - root;
        dr.y = 0.0;
        let dr = inv * dr * rate;
        f[ROOT_LIN_VEL] = dr.x as f32;
        f[ROOT_LIN_VEL + 1] = dr.z as f32;
        f[ROOT_HEIGHT] = (root.y - rest_root_height()) as f32;

        for j in 1..NUM_JOINTS {
            let mut rel = v3(&cur.joints[j]) - root;
            rel.y = cur.joints[j][1] as f64;
            let local = inv * rel;
            let rest = Vector3::from(REST_POSITIONS[j]);
            let base = LOCAL_POS + (j - 1) * 3;
            f[base] = (local.x - rest.x) as f32;
            f[base + 1] = (local.y - rest.y) as f32;
            f[base + 2] = (local.z - rest.z) as f32;

            let parent = PARENTS[j].expect("non-root joint has a parent");
            let bone = inv * (v3(&cur.joints[j]) - v3(&cur.joints[parent]));
            let r: Matrix3<f64> = rotation_between(&rest_offset(j), &bone);
            let d6 = rot6d_from_matrix(&r)?;
            let base = LOCAL_ROT + (j - 1) * 6;
            for (k, v) in d6.0.iter().enumerate() {
                f[base + k] = *v as f32;
            }
        }

        for j in 0..NUM_JOINTS {
            let vel = inv * (v3(&next.joints[j]) - v3(&cur.joints[j])) * rate;
            let base = JOINT_VEL + j * 3;
            f[base] = vel.x as f32;
            f[base + 1] = vel.y as f32;
            f[base + 2] = vel.z as f32;
        }

        for (k, &j) in FOOT_JOINTS.iter().enumerate() {
            let disp2 = (v3(&next.joints[j]) - v3(&cur.joints[j])).norm_squared();
            f[FOOT_CONTACT + k] = if disp2 < CONTACT_DISP2 { 1.0 } else { 0.0 };
        }
    }
    MotionSequence::new(data, fps)
}

/// Reconstruct joint positions from features by integrating the root channels
/// (starting at the origin, facing +z) and placing the local joint positions.
///
/// Produces one pose per feature frame. Foot-contact channels are not used.
pub fn joints_from_features(m: &MotionSequence) -> Result<Vec<Pose3D>> {
    if !m.data().len().is_multiple_of(FEATURE_DIM) {
        return Err(Error::InvalidInput("malformed feature width".into()));
    }
    let dt = 1.0 / m.fps() as f64;
    let mut yaw = 0.0f64;
    let mut root_xz = Vector3::zeros();
    let mut out = Vec::with_capacity(m.num_frames());
    for t in 0..m.num_frames() {
        let f = m.frame(t);
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "frame {t} has non-finite features"
            )));
        }
        let rot = yaw_matrix(yaw);
        let mut joints = [[0.0f32; 3]; NUM_JOINTS];
        let root_y = f[ROOT_HEIGHT] as f64 + rest_root_height();
        joints[PELVIS] = [root_xz.x as f32, root_y as f32, root_xz.z as f32];
        for j in 1..NUM_JOINTS {
            let base = LOCAL_POS + (j - 1) * 3;
            let rest = Vector3::from(REST_POSITIONS[j]);
            let local = Vector3::new(
                f[base] as f64 + rest.x,
                f[base + 1] as f64 + rest.y,
                f[base + 2] as f64 + rest.z,
            );
            let mut world = rot * local;
            world.x += root_xz.x;
            world.z += root_xz.z;
            joints[j] = [world.x as f32, world.y as f32, world.z as f32];
        }
        out.push(Pose3D { joints });

        let vel = rot * Vector3::new(f[ROOT_LIN_VEL] as f64, 0.0, f[ROOT_LIN_VEL + 1] as f64);
        root_xz += vel * dt;
        yaw += f[ROOT_ROT_VEL] as f64 * dt;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::skeleton::{forward_kinematics, rest_pose, L_ELBOW, L_SHOULDER};
    use crate::motion::DEFAULT_FPS;
    use nalgebra::{Rotation3, Vector3};

    fn arm_swing(frames: usize, walk_speed: f64, turn_rate: f64) -> Vec<Pose3D> {
        (0..frames)
            .map(|t| {
                let ph = t as f64 * 0.3;
                let mut local = [Matrix3::identity(); NUM_JOINTS];
                local[L_SHOULDER] =
                    Rotation3::from_axis_angle(&Vector3::z_axis(), -1.2 + 0.6 * ph.sin())
                        .into_inner();
                local[L_ELBOW] =
                    Rotation3::from_axis_angle(&Vector3::y_axis(), 0.4 * ph.cos()).into_inner();
                let yaw = turn_rate * t as f64;
                let z = walk_speed * t as f64 / DEFAULT_FPS as f64;
                let root = Vector3::new(0.0, rest_root_height() + 0.02 * ph.sin(), z);
                forward_kinematics(&local, yaw, root)
            })
            .collect()
    }

    #[test]
    fn width_is_263() {
        let m = features_from_joints(&arm_swing(5, 0.0, 0.0), DEFAULT_FPS).unwrap();
        assert_eq!(m.frame(0).len(), 263);
        assert_eq!(m.num_frames(), 4);
    }

    #[test]
    fn still_pose_has_zero_velocity() {
        let poses = vec![rest_pose(); 10];
        let m = features_from_joints(&poses, DEFAULT_FPS).unwrap();
        for t in 0..m.num_frames() {
            let f = m.frame(t);
            assert_eq!(f[ROOT_ROT_VEL], 0.0);
            assert_eq!(&f[ROOT_LIN_VEL..ROOT_LIN_VEL + 2], &[0.0, 0.0]);
            assert!(f[JOINT_VEL..JOINT_VEL + 66].iter().all(|&v| v == 0.0));
            assert_eq!(f[ROOT_HEIGHT], m.frame(0)[ROOT_HEIGHT]);
            assert!(f[FOOT_CONTACT..].iter().all(|&c| c == 1.0));
        }
    }

    #[test]
    fn single_frame_rejected() {
        assert!(matches!(
            features_from_joints(&[rest_pose()], DEFAULT_FPS),
            Err(Error::InsufficientLength { .. })
        ));
    }

    #[test]
    fn zero_features_decode_to_rest() {
        let m = MotionSequence::zeros(3, DEFAULT_FPS);
        let poses = joints_from_features(&m).unwrap();
        for p in poses {
            for (a, b) in p.joints.iter().zip(rest_pose().joints.iter()) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn constant_root_velocity_integrates() {
        let mut m = MotionSequence::zeros(11, DEFAULT_FPS);
        let v = 1.5f32;
        for t in 0..11 {
            m.frame_mut(t)[ROOT_LIN_VEL] = v;
        }
        let poses = joints_from_features(&m).unwrap();
        let want = 10.0 * v / DEFAULT_FPS as f32;
        assert!((poses[10].joints[PELVIS][0] - want).abs() < 1e-6);
    }

    #[test]
    fn joints_roundtrip_with_walk_and_turn() {
        let poses = arm_swing(40, 1.2, 0.02);
        let m = features_from_joints(&poses, DEFAULT_FPS).unwrap();
        let back = joints_from_features(&m).unwrap();
        assert_eq!(back.len(), poses.len() - 1);
        let mut worst = 0.0f32;
        for (a, b) in back.iter().zip(&poses) {
            for (ja, jb) in a.joints.iter().zip(b.joints.iter()) {
                for k in 0..3 {
                    worst = worst.max((ja[k] - jb[k]).abs());
                }
            }
        }
        assert!(worst < 1e-5, "max joint error {worst}");
    }

    #[test]
    fn features_are_stable_under_reconstruction() {
        // joints → features → joints → features keeps the position channels.
        let poses = arm_swing(30, 0.8, -0.03);
        let m = features_from_joints(&poses, DEFAULT_FPS).unwrap();
        let back = joints_from_features(&m).unwrap();
        let m2 = features_from_joints(&back, DEFAULT_FPS).unwrap();
        for t in 0..m2.num_frames() {
            for c in LOCAL_POS..LOCAL_ROT {
                assert!((m.frame(t)[c] - m2.frame(t)[c]).abs() < 1e-5);
            }
            assert!((m.frame(t)[ROOT_HEIGHT] - m2.frame(t)[ROOT_HEIGHT]).abs() < 1e-5);
        }
    }

    #[test]
    fn velocities_match_position_differences() {
        // Arm swing in place: joint velocity channels are the per-second
        // differences of the local position channels (root fixed, heading fixed).
        let poses = arm_swing(25, 0.0, 0.0);
        let m = features_from_joints(&poses, DEFAULT_FPS).unwrap();
        let rate = DEFAULT_FPS as f64;
        for t in 0..m.num_frames() - 1 {
            for j in 1..NUM_JOINTS {
                for k in 0..3 {
                    let c = LOCAL_POS + (j - 1) * 3 + k;
                    let fd = m.frame(t + 1)[c] as f64 - m.frame(t)[c] as f64;
                    let vel = m.frame(t)[JOINT_VEL + j * 3 + k] as f64 / rate;
                    assert!((vel - fd).abs() < 1e-6, "t={t} j={j} k={k}: {vel} vs {fd}");
                }
            }
        }
        // Independent oracle straight from the joints.
        for t in 0..m.num_frames() {
            for j in 0..NUM_JOINTS {
                for k in 0..3 {
                    let fd = poses[t + 1].joints[j][k] as f64 - poses[t].joints[j][k] as f64;
                    let vel = m.frame(t)[JOINT_VEL + j * 3 + k] as f64 / rate;
                    assert!((vel - fd).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rotation_channels_map_rest_bones_onto_current_bones() {
        let poses = arm_swing(6, 0.0, 0.0);
        let m = features_from_joints(&poses, DEFAULT_FPS).unwrap();
        for t in 0..m.num_frames() {
            for j in 1..NUM_JOINTS {
                let base = LOCAL_ROT + (j - 1) * 6;
                let mut d = [0.0f64; 6];
                for k in 0..6 {
                    d[k] = m.frame(t)[base + k] as f64;
                }
                let r = crate::motion::matrix_from_rot6d(&crate::motion::Rotation6D(d)).unwrap();
                let p = PARENTS[j].unwrap();
                let bone = v3(&poses[t].joints[j]) - v3(&poses[t].joints[p]);
                let mapped = r * rest_offset(j);
                assert!((mapped.normalize() - bone.normalize()).norm() < 1e-5);
            }
        }
    }
}
