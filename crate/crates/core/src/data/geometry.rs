use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{MesaError, Result};

/// Pinhole intrinsics in pixels. Pixel centers sit on integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Checks focal lengths and that the principal point lies within a `width`×`height` image.
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate(width, height)?;
        Ok(k)
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(MesaError::Invariant(format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy)));
        }
        if !(0.0..=width as f64).contains(&self.cx) || !(0.0..=height as f64).contains(&self.cy) {
            return Err(MesaError::Invariant(format!(
                "principal point ({}, {}) outside {width}x{height} image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// Centered principal point and a horizontal field of view of `fov_x` radians.
    pub fn from_fov(width: usize, height: usize, fov_x: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self { fx, fy: fx, cx: (width as f64 - 1.0) / 2.0, cy: (height as f64 - 1.0) / 2.0 }
    }

    /// Intrinsics after resizing the image by `sx`, `sy`, keeping pixel centers aligned.
    pub fn rescaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// Relative pose as an axis-angle rotation (radians) and a translation (meters).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose6D {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl Pose6D {
    pub fn zero() -> Self {
        Self { rotation: [0.0; 3], translation: [0.0; 3] }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 6 {
            return Err(MesaError::Shape(format!("pose vector needs 6 entries, got {}", v.len())));
        }
        Ok(Self { rotation: [v[0], v[1], v[2]], translation: [v[3], v[4], v[5]] })
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [a, b, c] = self.rotation;
        let [d, e, f] = self.translation;
        [a, b, c, d, e, f]
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Same rotation with the angle wrapped into `[0, π)`.
    pub fn canonical(&self) -> Self {
        let r = Vector3::from(self.rotation);
        let theta = r.norm();
        if theta < PI {
            return *self;
        }
        let axis = r / theta;
        let mut t = theta % (2.0 * PI);
        let mut axis = axis;
        if t >= PI {
            t = 2.0 * PI - t;
            axis = -axis;
        }
        Self { rotation: (axis * t).into(), translation: self.translation }
    }
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SE3Transform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-6;

/// `(sin θ / θ, (1 − cos θ) / θ²)` as functions of `θ²`, series-expanded near zero.
pub fn rodrigues_coefficients(theta2: f64) -> (f64, f64) {
    if theta2 < 1e-8 {
        (1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0)
    } else {
        let t = theta2.sqrt();
        let h = (0.5 * t).sin();
        (t.sin() / t, 2.0 * h * h / theta2)
    }
}

/// Derivatives of [`rodrigues_coefficients`] with respect to `θ²`.
pub fn rodrigues_coefficient_derivatives(theta2: f64) -> (f64, f64) {
    if theta2 < 1e-6 {
        (-1.0 / 6.0 + theta2 / 60.0, -1.0 / 24.0 + theta2 / 360.0)
    } else {
        let t = theta2.sqrt();
        let (s, c) = t.sin_cos();
        let h = (0.5 * t).sin();
        let da = (t * c - s) / (2.0 * t * theta2);
        let db = (t * s - 4.0 * h * h) / (2.0 * theta2 * theta2);
        (da, db)
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

impl SE3Transform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::from(t) }
    }

    pub fn validate(&self) -> Result<()> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if !(err <= ORTHONORMAL_TOL) || !((det - 1.0).abs() <= ORTHONORMAL_TOL) {
            return Err(MesaError::Invariant(format!("rotation not orthonormal (err {err:e}, det {det})")));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(MesaError::Invariant("non-finite translation".into()));
        }
        Ok(())
    }

    /// Exponential map: Rodrigues rotation from the axis-angle part, translation copied.
    pub fn from_pose6d(p: &Pose6D) -> Result<Self> {
        if !p.is_finite() {
            return Err(MesaError::InvalidInput(format!("non-finite pose {p:?}")));
        }
        let r = Vector3::from(p.rotation);
        let (a, b) = rodrigues_coefficients(r.norm_squared());
        let k = skew(&r);
        let rotation = Matrix3::identity() + k * a + k * k * b;
        Ok(Self { rotation, translation: Vector3::from(p.translation) })
    }

    /// Inverse of [`SE3Transform::from_pose6d`] with the rotation angle in `[0, π]`.
    pub fn to_pose6d(&self) -> Pose6D {
        let r = &self.rotation;
        let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        let theta = cos.acos();
        let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        let rotation = if theta < 1e-6 {
            w * 0.5 * (1.0 + theta * theta / 6.0)
        } else if PI - theta > 1e-4 {
            w * (theta / (2.0 * theta.sin()))
        } else {
            // near π: axis from the symmetric part R + Rᵀ = 2 cosθ I + 2(1 - cosθ) a aᵀ
            let s = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
            let (col, _) = (0..3)
                .map(|i| (i, s[(i, i)]))
                .fold((0, f64::MIN), |best, cur| if cur.1 > best.1 { cur } else { best });
            let mut axis: Vector3<f64> = s.column(col).into();
            axis /= axis.norm();
            if axis.dot(&w) < 0.0 {
                axis = -axis;
            }
            axis * theta
        };
        Pose6D { rotation: rotation.into(), translation: self.translation.into() }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SE3Transform) -> SE3Transform {
        SE3Transform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Transform {
        let rt = self.rotation.transpose();
        SE3Transform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 4 + j] = self.rotation[(i, j)];
            }
            out[i * 4 + 3] = self.translation[i];
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(MesaError::Shape(format!("pose needs 12 row-major entries, got {}", v.len())));
        }
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Self::new(rotation, Vector3::new(v[3], v[7], v[11]))
    }

    pub fn approx_eq(&self, other: &SE3Transform, tol: f64) -> bool {
        (self.rotation - other.rotation).abs().max() <= tol && (self.translation - other.translation).abs().max() <= tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_pose_is_identity() {
        let t = SE3Transform::from_pose6d(&Pose6D::zero()).unwrap();
        assert_eq!(t, SE3Transform::identity());
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let p = Pose6D { rotation: [0.0, 0.0, PI / 2.0], translation: [0.0; 3] };
        let t = SE3Transform::from_pose6d(&p).unwrap();
        let v = t.apply(&Vector3::new(1.0, 0.0, 0.0));
        assert!((v - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let p = Pose6D { rotation: [0.3, -0.2, 0.5], translation: [1.0, 2.0, -0.5] };
        let t = SE3Transform::from_pose6d(&p).unwrap();
        assert!(t.compose(&t.inverse()).approx_eq(&SE3Transform::identity(), 1e-9));
        assert!(t.inverse().inverse().approx_eq(&t, 1e-9));
        assert!(SE3Transform::identity().compose(&t).approx_eq(&t, 0.0));
    }

    #[test]
    fn translations_add() {
        let a = SE3Transform::from_translation([1.0, 2.0, 3.0]);
        let b = SE3Transform::from_translation([0.5, -1.0, 0.25]);
        assert_eq!(a.compose(&b).translation, Vector3::new(1.5, 1.0, 3.25));
    }

    #[test]
    fn non_finite_pose_rejected() {
        let p = Pose6D { rotation: [f64::NAN, 0.0, 0.0], translation: [0.0; 3] };
        assert!(SE3Transform::from_pose6d(&p).is_err());
    }

    #[test]
    fn canonical_wraps_large_angles() {
        let p = Pose6D { rotation: [0.0, 0.0, 1.5 * PI], translation: [0.0; 3] }.canonical();
        assert!((p.rotation[2] + 0.5 * PI).abs() < 1e-12);
        let a = SE3Transform::from_pose6d(&p).unwrap();
        let b = SE3Transform::from_pose6d(&Pose6D { rotation: [0.0, 0.0, 1.5 * PI], translation: [0.0; 3] }).unwrap();
        assert!(a.approx_eq(&b, 1e-12));
    }

    #[test]
    fn coefficient_derivatives_match_differences() {
        for &t2 in &[1e-9f64, 1e-4, 0.3, 2.0, 7.0] {
            let h = if t2 < 1e-4 { t2 * 0.5 } else { 1e-4 * t2 };
            let (a1, b1) = rodrigues_coefficients(t2 + h);
            let (a0, b0) = rodrigues_coefficients((t2 - h).max(0.0));
            let denom = t2 + h - (t2 - h).max(0.0);
            let (da, db) = rodrigues_coefficient_derivatives(t2);
            assert!(((a1 - a0) / denom - da).abs() < 1e-5, "dA at {t2}");
            assert!(((b1 - b0) / denom - db).abs() < 1e-5, "dB at {t2}");
        }
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(Intrinsics::new(0.0, 10.0, 5.0, 5.0, 10, 10).is_err());
        assert!(Intrinsics::new(10.0, 10.0, 50.0, 5.0, 10, 10).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn log_inverts_exp(rx in -2.0f64..2.0, ry in -2.0f64..2.0, rz in -2.0f64..2.0,
                               tx in -3.0f64..3.0, ty in -3.0f64..3.0, tz in -3.0f64..3.0) {
                let r = Vector3::new(rx, ry, rz);
                prop_assume!(r.norm() < PI - 0.1);
                let p = Pose6D { rotation: [rx, ry, rz], translation: [tx, ty, tz] };
                let back = SE3Transform::from_pose6d(&p).unwrap().to_pose6d();
                for (a, b) in p.to_array().iter().zip(back.to_array()) {
                    prop_assert!((a - b).abs() < 1e-7);
                }
            }

            #[test]
            fn exp_yields_valid_rotation(rx in -3.0f64..3.0, ry in -3.0f64..3.0, rz in -3.0f64..3.0) {
                let p = Pose6D { rotation: [rx, ry, rz], translation: [0.0; 3] };
                prop_assert!(SE3Transform::from_pose6d(&p).unwrap().validate().is_ok());
            }
        }
    }
}
