use nalgebra::{Matrix3, Vector2, Vector3};

use super::GeometryError;

/// Which eye of the rectified stereo rig an observation comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Eye {
    Left,
    Right,
}

/// Rectified stereo pinhole camera. The right eye sits `baseline` meters
/// along +x of the left eye with identical intrinsics and orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraModel {
    /// EuRoC-like 752×480 rig with an 11 cm baseline.
    fn default() -> Self {
        Self {
            fx: 458.0,
            fy: 458.0,
            cx: 367.0,
            cy: 248.0,
            baseline: 0.11,
            width: 752,
            height: 480,
        }
    }
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        baseline: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            baseline,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive"));
        }
        if !(self.baseline > 0.0 && self.baseline.is_finite()) {
            return Err(GeometryError::InvalidCamera("baseline must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera("image size must be positive"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidCamera("principal point must be finite"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn intrinsics_inv(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Translation taking left-camera coordinates into the given eye.
    pub fn eye_offset(&self, eye: Eye) -> Vector3<f64> {
        match eye {
            Eye::Left => Vector3::zeros(),
            Eye::Right => Vector3::new(-self.baseline, 0.0, 0.0),
        }
    }

    /// Pinhole projection of a point already expressed in the eye's frame.
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        )
    }

    /// Unit-depth ray through a pixel.
    pub fn backproject(&self, uv: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((uv[0] - self.cx) / self.fx, (uv[1] - self.cy) / self.fy, 1.0)
    }

    /// Half-open image rectangle test `[0, width) × [0, height)`.
    pub fn in_image(&self, uv: &Vector2<f64>) -> bool {
        uv[0] >= 0.0 && uv[1] >= 0.0 && uv[0] < self.width as f64 && uv[1] < self.height as f64
    }
}

/// Stereo point triangulation on a rectified rig.
///
/// Returns `None` when the disparity is non-positive or the implied depth is
/// outside `(0, max_depth]`.
pub fn triangulate_point_stereo(
    left: &Vector2<f64>,
    right: &Vector2<f64>,
    cam: &CameraModel,
    max_depth: f64,
) -> Option<Vector3<f64>> {
    let disparity = left[0] - right[0];
    if !(disparity > 0.0) {
        return None;
    }
    let depth = cam.fx * cam.baseline / disparity;
    if !(depth > 0.0 && depth <= max_depth) {
        return None;
    }
    Some(cam.backproject(left) * depth)
}
