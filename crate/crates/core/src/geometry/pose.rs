use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};

use super::GeometryError;

/// Cross-product matrix: `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Rigid transform in SE(3).
///
/// The tangent used for optimization is `[v; ω]` (translation first) with
/// the retraction `R ← Exp(ω)·R`, `t ← t + v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Rotation3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from a rotation matrix, rejecting anything that is not
    /// orthonormal with determinant +1 to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let dev = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det_dev = (rotation.determinant() - 1.0).abs();
        let worst = dev.max(det_dev);
        if !worst.is_finite() || worst > 1e-9 {
            return Err(GeometryError::InvalidRotation(worst));
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            translation,
        })
    }

    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Rotation given as an axis-angle vector.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle),
            translation,
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        self.rotation.matrix()
    }

    pub fn rotation3(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let v = Vector3::new(delta[0], delta[1], delta[2]);
        let w = Vector3::new(delta[3], delta[4], delta[5]);
        let mut rotation = Rotation3::new(w) * self.rotation;
        rotation.renormalize();
        Pose {
            rotation,
            translation: self.translation + v,
        }
    }

    /// Inverse of [`Pose::retract`]: the tangent taking `self` to `other`.
    pub fn local(&self, other: &Pose) -> Vector6<f64> {
        let w = (other.rotation * self.rotation.inverse()).scaled_axis();
        let v = other.translation - self.translation;
        Vector6::new(v[0], v[1], v[2], w[0], w[1], w[2])
    }

    /// Camera center in the frame this pose maps from (world center for `T_cw`).
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Angle of the relative rotation, stable near zero.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let q = UnitQuaternion::from_rotation_matrix(&(other.rotation * self.rotation.inverse()));
        2.0 * q.imag().norm().atan2(q.scalar().abs())
    }
}
