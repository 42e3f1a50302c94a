//! Rigid-body transforms in 3-D and their first-order uncertainty calculus.
//!
//! Conventions used across the crate:
//!
//! * Rotations are stored as 3x3 matrices; quaternions appear only at
//!   serialization boundaries.
//! * Tangent vectors ([`Twist6`]) order the rotational part first:
//!   `[w_x, w_y, w_z, v_x, v_y, v_z]` in (rad, m). Covariance and
//!   information matrices use the same block order.
//! * Uncertainty is attached on the right: a noisy transform is
//!   `T_true * exp(delta)` with `delta ~ N(0, cov)`. Composition therefore
//!   transports the accumulated covariance with the adjoint of the *inverse*
//!   of the appended transform (see [`propagate_covariance`]).
//!
//! The logarithm is restricted to the principal branch. Within 1e-6 rad of
//! pi the rotation axis is not numerically recoverable from the skew part,
//! and [`log_map`] reports [`Error::AngleNearPi`] instead of degrading
//! silently.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use crate::error::{Error, Result};

/// 6x6 covariance of a [`Twist6`], rotation block first, units (rad^2, m^2).
pub type Covariance6 = Matrix6<f64>;

/// Angle below which trigonometric ratios switch to series expansions.
const SMALL_ANGLE: f64 = 1e-4;

/// Rotation logarithms are rejected within this window of pi.
pub const NEAR_PI_CUTOFF: f64 = 1e-6;

/// Eigenvalue floor for treating a covariance as positive definite.
const COVARIANCE_EIGENVALUE_FLOOR: f64 = 1e-12;

/// Element of SE(3): rotation matrix plus translation vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Element of se(3): rotational part first, translational part second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist6 {
    pub rot: Vector3<f64>,
    pub trans: Vector3<f64>,
}

impl Twist6 {
    pub fn new(rot: Vector3<f64>, trans: Vector3<f64>) -> Self {
        Self { rot, trans }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into())
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rot);
        v.fixed_rows_mut::<3>(3).copy_from(&self.trans);
        v
    }

    pub fn norm(&self) -> f64 {
        self.as_vector().norm()
    }
}

impl Pose3 {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    /// Rotation angle in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Maximum absolute deviation of `R^T R` from the identity; a cheap
    /// orthonormality diagnostic used by validity tests.
    pub fn orthonormality_defect(&self) -> f64 {
        let d = self.rotation.transpose() * self.rotation - Matrix3::identity();
        d.amax()
    }
}

/// Skew-symmetric matrix such that `hat(w) * v = w x v`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Group composition: `a` then `b` in `a`'s frame.
pub fn compose(a: &Pose3, b: &Pose3) -> Pose3 {
    Pose3::new(
        a.rotation * b.rotation,
        a.rotation * b.translation + a.translation,
    )
}

/// Group inverse.
pub fn inverse(a: &Pose3) -> Pose3 {
    let rt = a.rotation.transpose();
    Pose3::new(rt, -(rt * a.translation))
}

/// `a^-1 * b`, the pose of `b` expressed in `a`'s frame.
pub fn relative(a: &Pose3, b: &Pose3) -> Pose3 {
    compose(&inverse(a), b)
}

/// Rotation angle of an orthonormal matrix, in [0, pi].
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    // atan2 form: accurate near both 0 and pi, unlike acos of the trace.
    let skew = 0.5 * (r - r.transpose());
    let sin_norm = Vector3::new(skew[(2, 1)], skew[(0, 2)], skew[(1, 0)]).norm();
    let cos = 0.5 * (r.trace() - 1.0);
    sin_norm.atan2(cos)
}

/// SO(3) exponential of a rotation vector (axis * angle).
pub fn rotation_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let wx = hat(w);
    // R = I + a*hat(w) + b*hat(w)^2 with a = sin(t)/t, b = (1-cos(t))/t^2.
    let (a, b) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    Matrix3::identity() + wx * a + wx * wx * b
}

/// Principal-branch SO(3) logarithm as a rotation vector.
///
/// Fails with [`Error::AngleNearPi`] when the angle is within
/// [`NEAR_PI_CUTOFF`] of pi.
pub fn rotation_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let skew = 0.5 * (r - r.transpose());
    let s = Vector3::new(skew[(2, 1)], skew[(0, 2)], skew[(1, 0)]);
    let cos = 0.5 * (r.trace() - 1.0);
    let theta = s.norm().atan2(cos);
    if theta >= core::f64::consts::PI - NEAR_PI_CUTOFF {
        return Err(Error::AngleNearPi { angle: theta });
    }
    if theta < SMALL_ANGLE {
        // w = s * (1 + t^2/6 + 7 t^4/360): series for t / sin(t).
        let t2 = theta * theta;
        return Ok(s * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0));
    }
    Ok(s * (theta / theta.sin()))
}

/// SE(3) exponential map.
pub fn exp_map(xi: &Twist6) -> Pose3 {
    let theta = xi.rot.norm();
    let wx = hat(&xi.rot);
    // V = I + b*hat(w) + c*hat(w)^2, c = (t - sin(t))/t^3.
    let (b, c) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    let v = Matrix3::identity() + wx * b + wx * wx * c;
    Pose3::new(rotation_exp(&xi.rot), v * xi.trans)
}

/// Principal-branch SE(3) logarithm.
///
/// Fails with [`Error::AngleNearPi`] when the rotation angle is within
/// [`NEAR_PI_CUTOFF`] of pi.
pub fn log_map(pose: &Pose3) -> Result<Twist6> {
    let w = rotation_log(&pose.rotation)?;
    let theta = w.norm();
    let wx = hat(&w);
    // V^-1 = I - hat(w)/2 + e*hat(w)^2,
    // e = (1 - t*sin(t) / (2*(1-cos(t)))) / t^2.
    let e = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = 0.5 * theta;
        // Cotangent form keeps the subtraction benign for moderate angles.
        (1.0 - half * (half.cos() / half.sin())) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - wx * 0.5 + wx * wx * e;
    Ok(Twist6::new(w, v_inv * pose.translation))
}

/// 6x6 adjoint of a pose under the rotation-first twist ordering:
///
/// ```text
/// Ad(T) = [ R        0 ]
///         [ hat(t)R  R ]
/// ```
pub fn adjoint(pose: &Pose3) -> Matrix6<f64> {
    let mut ad = Matrix6::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation);
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&pose.rotation);
    ad.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(hat(&pose.translation) * pose.rotation));
    ad
}

/// se(3) adjoint (little-ad) of a twist:
///
/// ```text
/// ad(xi) = [ hat(w)  0      ]
///          [ hat(v)  hat(w) ]
/// ```
pub fn ad_twist(xi: &Twist6) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    let wx = hat(&xi.rot);
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&wx);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&wx);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&hat(&xi.trans));
    m
}

/// Inverse right Jacobian of the SE(3) logarithm, to second order in the
/// twist: `I + ad(xi)/2 + ad(xi)^2/12`. Adequate for Gauss-Newton residuals
/// at noise scale, where the truncation error is cubic in the residual.
pub fn inv_right_jacobian(xi: &Twist6) -> Matrix6<f64> {
    let ad = ad_twist(xi);
    Matrix6::identity() + ad * 0.5 + ad * ad * (1.0 / 12.0)
}

/// First-order covariance transport: `Ad(T) * cov * Ad(T)^T`, symmetrized.
pub fn propagate_covariance(pose: &Pose3, cov: &Covariance6) -> Covariance6 {
    let ad = adjoint(pose);
    let m = ad * cov * ad.transpose();
    (m + m.transpose()) * 0.5
}

/// Covariance accumulation for the composition `acc * next` of two noisy
/// transforms with right-attached covariances.
pub fn compose_covariance(
    cov_acc: &Covariance6,
    next: &Pose3,
    cov_next: &Covariance6,
) -> Covariance6 {
    propagate_covariance(&inverse(next), cov_acc) + cov_next
}

/// Squared Mahalanobis distance of a residual twist under `cov`.
///
/// Fails with [`Error::SingularCovariance`] unless the smallest eigenvalue
/// of `cov` exceeds 1e-12.
pub fn mahalanobis_sq(residual: &Twist6, cov: &Covariance6) -> Result<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if !(min_eig > COVARIANCE_EIGENVALUE_FLOOR) {
        return Err(Error::SingularCovariance {
            min_eigenvalue: min_eig,
        });
    }
    let r = residual.as_vector();
    let projected = eig.eigenvectors.transpose() * r;
    let mut total = 0.0;
    for i in 0..6 {
        total += projected[i] * projected[i] / eig.eigenvalues[i];
    }
    Ok(total)
}

/// Nearest rotation matrix in the Frobenius sense, via SVD with determinant
/// correction. Used to re-orthonormalize relaxed rotation blocks.
pub fn project_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd of 3x3 requested with u");
    let vt = svd.v_t.expect("svd of 3x3 requested with v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        // Flip the weakest singular direction to land on SO(3), not O(3).
        let mut u_fixed = u;
        u_fixed.column_mut(2).neg_mut();
        r = u_fixed * vt;
    }
    r
}
