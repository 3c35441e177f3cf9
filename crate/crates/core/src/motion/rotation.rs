//! Continuous 6D rotation representation: the first two columns of a rotation
//! matrix, recovered by Gram-Schmidt.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `[c0.x, c0.y, c0.z, c1.x, c1.y, c1.z]` for columns `c0`, `c1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
}

const ORTHONORMAL_TOL: f64 = 1e-4;
const DEGENERATE_NORM: f64 = 1e-8;

pub fn rot6d_from_matrix(r: &Matrix3<f64>) -> Result<Rotation6D> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "rotation matrix has non-finite entries".into(),
        ));
    }
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > ORTHONORMAL_TOL {
        return Err(Error::InvalidInput(format!(
            "matrix is not orthonormal (max |RᵀR − I| = {err:.3e})"
        )));
    }
    Ok(Rotation6D([
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ]))
}

pub fn matrix_from_rot6d(d: &Rotation6D) -> Result<Matrix3<f64>> {
    let v = d.0;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(
            "6D rotation has non-finite entries".into(),
        ));
    }
    let a1 = Vector3::new(v[0], v[1], v[2]);
    let a2 = Vector3::new(v[3], v[4], v[5]);
    let n1 = a1.norm();
    if n1 <= DEGENERATE_NORM {
        return Err(Error::Degenerate(
            "first 6D column has near-zero norm".into(),
        ));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if n2 <= DEGENERATE_NORM.max(1e-6 * a2.norm()) {
        return Err(Error::Degenerate(
            "6D columns are parallel or the second is near zero".into(),
        ));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Smallest rotation taking direction `from` onto direction `to`.
pub(crate) fn rotation_between(from: &Vector3<f64>, to: &Vector3<f64>) -> Matrix3<f64> {
    let (nf, nt) = (from.norm(), to.norm());
    if nf < 1e-12 || nt < 1e-12 {
        return Matrix3::identity();
    }
    let (a, b) = (from / nf, to / nt);
    let c = a.dot(&b);
    if c > -1.0 + 1e-9 {
        // Rodrigues form: I + [v]x + [v]x² / (1 + cos).
        let v = a.cross(&b);
        let vx = v.cross_matrix();
        return Matrix3::identity() + vx + vx * vx / (1.0 + c);
    }
    // Antiparallel: half turn about any axis perpendicular to `a`.
    let helper = if a.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let axis = Unit::new_normalize(a.cross(&helper));
    Rotation3::from_axis_angle(&axis, std::f64::consts::PI).into_inner()
}

/// Rotation about the vertical (+y) axis.
pub(crate) fn yaw_matrix(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}
