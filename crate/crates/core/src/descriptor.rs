//! Segment-level line descriptors pooled from two dense feature maps.
//!
//! Each segment is sampled at `N_s` evenly spaced points (both endpoints
//! included), the samples are bilinearly interpolated from the line and point
//! branches, average-pooled and ℓ2-normalized per branch, then concatenated
//! with weights driven by the local keypoint density around the segment.

use nalgebra::{DVector, Vector2};
use thiserror::Error;

use crate::geometry::LineSegment2D;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DescriptorError {
    #[error("feature map data has {actual} values, expected {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("feature map scale must be positive, got {0}")]
    InvalidScale(f64),
    #[error("sample ({x:.3}, {y:.3}) lies outside the {width}×{height} feature grid")]
    OutOfBounds { x: f64, y: f64, width: usize, height: usize },
    #[error("pooled feature has (near) zero norm")]
    DegenerateDescriptor,
    #[error("invalid descriptor config: {0}")]
    InvalidConfig(&'static str),
}

/// Dense `D×H×W` grid, channel-major then row-major. Image pixel `p` maps to
/// feature coordinate `p·scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    depth: usize,
    height: usize,
    width: usize,
    scale: f64,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        depth: usize,
        height: usize,
        width: usize,
        scale: f64,
        data: Vec<f32>,
    ) -> Result<Self, DescriptorError> {
        let expected = depth * height * width;
        if data.len() != expected {
            return Err(DescriptorError::ShapeMismatch {
                expected,
                actual: data.len(),
            });
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(DescriptorError::InvalidScale(scale));
        }
        Ok(Self {
            depth,
            height,
            width,
            scale,
            data,
        })
    }

    pub fn zeros(depth: usize, height: usize, width: usize, scale: f64) -> Result<Self, DescriptorError> {
        Self::new(depth, height, width, scale, vec![0.0; depth * height * width])
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    /// Feature coordinate of an image pixel, clamped onto the grid.
    pub fn clamp_to_grid(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        Vector2::new(
            (p[0] * self.scale).clamp(0.0, max_x),
            (p[1] * self.scale).clamp(0.0, max_y),
        )
    }

    /// Bilinear interpolation at an in-grid feature coordinate.
    fn interpolate(&self, x: f64, y: f64) -> DVector<f64> {
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w01 = fx * (1.0 - fy);
        let w10 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        DVector::from_iterator(
            self.depth,
            (0..self.depth).map(|c| {
                w00 * self.get(c, y0, x0) as f64
                    + w01 * self.get(c, y0, x1) as f64
                    + w10 * self.get(c, y1, x0) as f64
                    + w11 * self.get(c, y1, x1) as f64
            }),
        )
    }
}

/// Pooling and weighting hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorConfig {
    pub n_samples: usize,
    /// Keypoint neighborhood radius, pixels.
    pub radius: f64,
    /// Baseline keypoint density, 1/pixels.
    pub rho_0: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            radius: 3.0,
            rho_0: 0.1,
        }
    }
}

impl DescriptorConfig {
    pub fn validate(&self) -> Result<(), DescriptorError> {
        if self.n_samples < 2 {
            return Err(DescriptorError::InvalidConfig("n_samples must be at least 2"));
        }
        if !(self.radius > 0.0) {
            return Err(DescriptorError::InvalidConfig("radius must be positive"));
        }
        if !(self.rho_0 > 0.0) {
            return Err(DescriptorError::InvalidConfig("rho_0 must be positive"));
        }
        Ok(())
    }
}

/// Unit-norm concatenated descriptor `[γ_line·f_line; γ_pt·f_pt] / ‖·‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct LineDescriptor {
    pub vector: DVector<f64>,
    pub gamma_line: f64,
    pub gamma_pt: f64,
}

impl LineDescriptor {
    pub fn similarity(&self, other: &LineDescriptor) -> f64 {
        self.vector.dot(&other.vector)
    }
}

/// Channelwise bilinear interpolation at an image-pixel location.
pub fn sample_bilinear(map: &FeatureMap, point: &Vector2<f64>) -> Result<DVector<f64>, DescriptorError> {
    let x = point[0] * map.scale;
    let y = point[1] * map.scale;
    let max_x = (map.width - 1) as f64;
    let max_y = (map.height - 1) as f64;
    if !(x >= 0.0 && y >= 0.0 && x <= max_x && y <= max_y) {
        return Err(DescriptorError::OutOfBounds {
            x,
            y,
            width: map.width,
            height: map.height,
        });
    }
    Ok(map.interpolate(x, y))
}

/// Mean of `n_samples` bilinear samples along the segment, ℓ2-normalized.
/// Sample locations are clamped onto the feature grid first.
pub fn pool_segment(
    map: &FeatureMap,
    seg: &LineSegment2D,
    n_samples: usize,
) -> Result<DVector<f64>, DescriptorError> {
    if n_samples < 2 {
        return Err(DescriptorError::InvalidConfig("n_samples must be at least 2"));
    }
    let mut acc = DVector::zeros(map.depth);
    let denom = (n_samples - 1) as f64;
    for k in 0..n_samples {
        let p = map.clamp_to_grid(&seg.point_at(k as f64 / denom));
        acc += map.interpolate(p[0], p[1]);
    }
    acc /= n_samples as f64;
    let norm = acc.norm();
    if !(norm >= 1e-12) {
        return Err(DescriptorError::DegenerateDescriptor);
    }
    Ok(acc / norm)
}

/// Keypoints per pixel of segment length whose orthogonal distance to the
/// segment's line is strictly below `radius` and whose foot point falls
/// within the segment extent.
pub fn local_point_density(seg: &LineSegment2D, keypoints: &[Vector2<f64>], radius: f64) -> f64 {
    let dir = seg.direction();
    let len = dir.norm();
    if !(len > 0.0) {
        return 0.0;
    }
    let unit = dir / len;
    let near = keypoints
        .iter()
        .filter(|kp| {
            let w = *kp - seg.start;
            let along = w.dot(&unit) / len;
            let ortho = (unit[0] * w[1] - unit[1] * w[0]).abs();
            ortho < radius && (0.0..=1.0).contains(&along)
        })
        .count();
    near as f64 / len
}

/// `(γ_pt, γ_line) = (ρ/(ρ+ρ₀), ρ₀/(ρ+ρ₀))`.
pub fn branch_weights(rho: f64, rho_0: f64) -> (f64, f64) {
    let total = rho + rho_0;
    (rho / total, rho_0 / total)
}

/// Full descriptor for one segment.
///
/// If exactly one branch pools to a zero vector its block is zeroed and the
/// other branch carries weight 1.
pub fn build_descriptor(
    map_line: &FeatureMap,
    map_pt: &FeatureMap,
    seg: &LineSegment2D,
    keypoints: &[Vector2<f64>],
    cfg: &DescriptorConfig,
) -> Result<LineDescriptor, DescriptorError> {
    cfg.validate()?;
    let rho = local_point_density(seg, keypoints, cfg.radius);
    let (mut gamma_pt, mut gamma_line) = branch_weights(rho, cfg.rho_0);
    let d_line = map_line.depth;
    let d_pt = map_pt.depth;

    let f_line = match pool_segment(map_line, seg, cfg.n_samples) {
        Ok(v) => Some(v),
        Err(DescriptorError::DegenerateDescriptor) => None,
        Err(e) => return Err(e),
    };
    let f_pt = match pool_segment(map_pt, seg, cfg.n_samples) {
        Ok(v) => Some(v),
        Err(DescriptorError::DegenerateDescriptor) => None,
        Err(e) => return Err(e),
    };
    match (&f_line, &f_pt) {
        (None, None) => return Err(DescriptorError::DegenerateDescriptor),
        (None, Some(_)) => (gamma_line, gamma_pt) = (0.0, 1.0),
        (Some(_), None) => (gamma_line, gamma_pt) = (1.0, 0.0),
        _ => {}
    }

    let mut v = DVector::zeros(d_line + d_pt);
    if let Some(f) = &f_line {
        v.rows_mut(0, d_line).copy_from(&(f * gamma_line));
    }
    if let Some(f) = &f_pt {
        v.rows_mut(d_line, d_pt).copy_from(&(f * gamma_pt));
    }
    let norm = v.norm();
    if !(norm >= 1e-12) {
        return Err(DescriptorError::DegenerateDescriptor);
    }
    Ok(LineDescriptor {
        vector: v / norm,
        gamma_line,
        gamma_pt,
    })
}
