//! Rigid transforms, the rectified stereo pinhole camera, Plücker line
//! algebra, and point/line reprojection residuals with analytic Jacobians.
//!
//! Poses are world-to-camera (`T_cw`): a world point `p` maps to
//! `R·p + t` in the left camera frame. Camera axes are x right, y down,
//! z forward.

mod camera;
mod factor;
mod line;
mod pose;

pub use camera::{triangulate_point_stereo, CameraModel, Eye};
pub use factor::{line_residual, point_residual, LineResidual, PointResidual};
pub use line::{
    line_reprojection_residual, project_line, transform_plucker, triangulate_line_stereo, Line2D,
    LineSegment2D, OrthonormalLine, PluckerLine,
};
pub use pose::{skew, Pose};

use thiserror::Error;

/// ‖n_c‖ below this means the line passes through the camera center.
pub const DEGENERATE_PROJECTION_TOL: f64 = 1e-12;
/// Sine of the angle between back-projected planes below which they count as parallel.
pub const PARALLEL_PLANES_TOL: f64 = 1e-9;
/// Squared-norm floor for the (l1, l2) part of a homogeneous image line.
pub const DEGENERATE_LINE_TOL: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with determinant +1 (deviation {0:e})")]
    InvalidRotation(f64),
    #[error("invalid camera model: {0}")]
    InvalidCamera(&'static str),
    #[error("line violates the Plücker constraint or has zero direction")]
    NotPlucker,
    #[error("line passes through the camera center")]
    DegenerateProjection,
    #[error("homogeneous image line has l1² + l2² ≈ 0")]
    DegenerateLine,
    #[error("back-projected planes are parallel")]
    ParallelPlanes,
    #[error("segment shorter than 1 px")]
    DegenerateSegment,
    #[error("point is behind the camera")]
    PointBehindCamera,
}
