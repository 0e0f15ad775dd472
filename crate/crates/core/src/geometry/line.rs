use nalgebra::{Matrix3, Matrix6x4, Rotation3, Vector2, Vector3, Vector4};

use super::camera::CameraModel;
use super::pose::Pose;
use super::{
    GeometryError, DEGENERATE_LINE_TOL, DEGENERATE_PROJECTION_TOL, PARALLEL_PLANES_TOL,
};

/// A detected image segment. `length` caches `‖end − start‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSegment2D {
    pub start: Vector2<f64>,
    pub end: Vector2<f64>,
    pub length: f64,
    pub track_id: Option<u64>,
}

impl LineSegment2D {
    pub fn new(start: Vector2<f64>, end: Vector2<f64>) -> Self {
        Self {
            start,
            end,
            length: (end - start).norm(),
            track_id: None,
        }
    }

    pub fn with_track_id(mut self, id: u64) -> Self {
        self.track_id = Some(id);
        self
    }

    pub fn direction(&self) -> Vector2<f64> {
        self.end - self.start
    }

    pub fn point_at(&self, s: f64) -> Vector2<f64> {
        self.start + (self.end - self.start) * s
    }

    /// Homogeneous line through both endpoints.
    pub fn homogeneous(&self) -> Vector3<f64> {
        self.start.push(1.0).cross(&self.end.push(1.0))
    }
}

/// Homogeneous image line `l1·u + l2·v + l3 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line2D {
    coeffs: Vector3<f64>,
}

impl Line2D {
    pub fn new(l1: f64, l2: f64, l3: f64) -> Result<Self, GeometryError> {
        Self::from_vector(Vector3::new(l1, l2, l3))
    }

    pub fn from_vector(coeffs: Vector3<f64>) -> Result<Self, GeometryError> {
        let s = coeffs[0] * coeffs[0] + coeffs[1] * coeffs[1];
        if !(s >= DEGENERATE_LINE_TOL) || !coeffs[2].is_finite() {
            return Err(GeometryError::DegenerateLine);
        }
        Ok(Self { coeffs })
    }

    pub fn coeffs(&self) -> &Vector3<f64> {
        &self.coeffs
    }

    /// Scaled so that `l1² + l2² = 1`.
    pub fn normalized(&self) -> Line2D {
        let s = (self.coeffs[0].powi(2) + self.coeffs[1].powi(2)).sqrt();
        Line2D {
            coeffs: self.coeffs / s,
        }
    }

    /// Signed distance of a pixel to the line.
    pub fn signed_distance(&self, p: &Vector2<f64>) -> f64 {
        let s = (self.coeffs[0].powi(2) + self.coeffs[1].powi(2)).sqrt();
        (self.coeffs[0] * p[0] + self.coeffs[1] * p[1] + self.coeffs[2]) / s
    }
}

/// Endpoint-to-line distances `[p̃_sᵀl, p̃_eᵀl] / √(l1² + l2²)` in pixels.
pub fn line_reprojection_residual(
    l: &Line2D,
    seg: &LineSegment2D,
) -> Result<Vector2<f64>, GeometryError> {
    let c = l.coeffs();
    let s2 = c[0] * c[0] + c[1] * c[1];
    if !(s2 >= DEGENERATE_LINE_TOL) {
        return Err(GeometryError::DegenerateLine);
    }
    let s = s2.sqrt();
    Ok(Vector2::new(
        seg.start.push(1.0).dot(c) / s,
        seg.end.push(1.0).dot(c) / s,
    ))
}

/// Plücker line `(n, d)` with `n = p × d` for any point `p` on the line.
/// Stored with `‖d‖ = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluckerLine {
    n: Vector3<f64>,
    d: Vector3<f64>,
}

impl PluckerLine {
    /// Normalizes to unit direction and checks `|⟨n, d⟩| ≤ 1e-9`.
    pub fn new(n: Vector3<f64>, d: Vector3<f64>) -> Result<Self, GeometryError> {
        let dn = d.norm();
        if !(dn > 1e-12) || !n.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::NotPlucker);
        }
        let (n, d) = (n / dn, d / dn);
        if n.dot(&d).abs() > 1e-9 {
            return Err(GeometryError::NotPlucker);
        }
        Ok(Self { n, d })
    }

    pub fn from_points(p: &Vector3<f64>, q: &Vector3<f64>) -> Result<Self, GeometryError> {
        let d = q - p;
        let dn = d.norm();
        if !(dn > 1e-12) {
            return Err(GeometryError::NotPlucker);
        }
        let d = d / dn;
        Ok(Self { n: p.cross(&d), d })
    }

    pub fn normal(&self) -> &Vector3<f64> {
        &self.n
    }

    pub fn direction(&self) -> &Vector3<f64> {
        &self.d
    }

    /// Point on the line nearest the origin.
    pub fn closest_point(&self) -> Vector3<f64> {
        self.d.cross(&self.n)
    }

    pub fn point_at(&self, s: f64) -> Vector3<f64> {
        self.closest_point() + self.d * s
    }

    /// Distance from the origin (`‖n‖` under unit direction).
    pub fn distance_to_origin(&self) -> f64 {
        self.n.norm()
    }

    /// Point on the line closest to the ray `λ·dir` from the origin.
    /// `None` if the ray is parallel to the line.
    pub fn closest_point_to_ray(&self, dir: &Vector3<f64>) -> Option<Vector3<f64>> {
        let p0 = self.closest_point();
        let u = self.d;
        let v = dir.normalize();
        let b = u.dot(&v);
        let denom = 1.0 - b * b;
        if denom < 1e-14 {
            return None;
        }
        // minimise ‖p0 + s·u − λ·v‖ over (s, λ)
        let d0 = u.dot(&p0);
        let e0 = v.dot(&p0);
        let s = (b * e0 - d0) / denom;
        Some(p0 + u * s)
    }

    pub fn transform(&self, pose: &Pose) -> PluckerLine {
        transform_plucker(self, pose)
    }
}

/// Camera-frame line: `n_c = R·n_w + [t]×·R·d_w`, `d_c = R·d_w`.
pub fn transform_plucker(line: &PluckerLine, pose: &Pose) -> PluckerLine {
    let rd = pose.rotation() * line.d;
    let rn = pose.rotation() * line.n;
    PluckerLine {
        n: rn + pose.translation().cross(&rd),
        d: rd,
    }
}

/// Image line `l ∝ K⁻ᵀ·n_c`, normalized to `l1² + l2² = 1`.
pub fn project_line(line_c: &PluckerLine, cam: &CameraModel) -> Result<Line2D, GeometryError> {
    if !(line_c.n.norm() >= DEGENERATE_PROJECTION_TOL) {
        return Err(GeometryError::DegenerateProjection);
    }
    let l = cam.intrinsics_inv().transpose() * line_c.n;
    let s2 = l[0] * l[0] + l[1] * l[1];
    if !(s2 >= DEGENERATE_LINE_TOL) {
        return Err(GeometryError::DegenerateProjection);
    }
    Ok(Line2D {
        coeffs: l / s2.sqrt(),
    })
}

/// Intersects the planes back-projected from a left/right segment pair.
/// The result is expressed in the left camera frame.
pub fn triangulate_line_stereo(
    seg_left: &LineSegment2D,
    seg_right: &LineSegment2D,
    cam: &CameraModel,
) -> Result<PluckerLine, GeometryError> {
    if !(seg_left.length >= 1.0 && seg_right.length >= 1.0) {
        return Err(GeometryError::DegenerateSegment);
    }
    let plane_normal = |seg: &LineSegment2D| {
        cam.backproject(&seg.start)
            .cross(&cam.backproject(&seg.end))
            .normalize()
    };
    // left plane passes through the origin; right plane through (b, 0, 0)
    let n1 = plane_normal(seg_left);
    let n2 = plane_normal(seg_right);
    let offset2 = -n2[0] * cam.baseline;
    let dir = n1.cross(&n2);
    if !(dir.norm() >= PARALLEL_PLANES_TOL) {
        return Err(GeometryError::ParallelPlanes);
    }
    let moment = -offset2 * n1;
    let dn = dir.norm();
    Ok(PluckerLine {
        n: moment / dn,
        d: dir / dn,
    })
}

/// Minimal 4-dof line parameterization: `U ∈ SO(3)` and an angle `φ` with
/// `(n, d) ∝ (cos φ·u₁, sin φ·u₂)`.
///
/// Updates are `U ← U·Exp(δθ)`, `φ ← φ + δφ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthonormalLine {
    u: Rotation3<f64>,
    phi: f64,
}

impl OrthonormalLine {
    pub fn from_plucker(line: &PluckerLine) -> Self {
        let rho = line.n.norm();
        let u2 = line.d;
        let u1 = if rho > 1e-12 {
            line.n / rho
        } else {
            // moment-free line: any unit vector orthogonal to d
            let helper = if u2[0].abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
            (helper - u2 * u2.dot(&helper)).normalize()
        };
        let u3 = u1.cross(&u2);
        let m = Matrix3::from_columns(&[u1, u2, u3]);
        Self {
            u: Rotation3::from_matrix_unchecked(m),
            phi: 1.0f64.atan2(rho),
        }
    }

    pub fn to_plucker(&self) -> PluckerLine {
        let m = self.u.matrix();
        let (s, c) = self.phi.sin_cos();
        PluckerLine {
            n: m.column(0) * (c / s),
            d: m.column(1).into_owned(),
        }
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn retract(&self, delta: &Vector4<f64>) -> Self {
        let mut u = self.u * Rotation3::new(Vector3::new(delta[0], delta[1], delta[2]));
        u.renormalize();
        Self {
            u,
            phi: self.phi + delta[3],
        }
    }

    /// Unnormalized Plücker coordinates `(cos φ·u₁, sin φ·u₂)`.
    pub fn raw(&self) -> (Vector3<f64>, Vector3<f64>) {
        let m = self.u.matrix();
        let (s, c) = self.phi.sin_cos();
        (m.column(0) * c, m.column(1) * s)
    }

    /// Jacobian of [`OrthonormalLine::raw`] (stacked `[n; d]`) w.r.t. `[δθ; δφ]`.
    pub fn raw_jacobian(&self) -> Matrix6x4<f64> {
        let m = self.u.matrix();
        let u1: Vector3<f64> = m.column(0).into_owned();
        let u2: Vector3<f64> = m.column(1).into_owned();
        let u3: Vector3<f64> = m.column(2).into_owned();
        let (s, c) = self.phi.sin_cos();
        let mut j = Matrix6x4::zeros();
        // dn/dθ = cos φ·[0, −u₃, u₂]
        j.fixed_view_mut::<3, 1>(0, 1).copy_from(&(-u3 * c));
        j.fixed_view_mut::<3, 1>(0, 2).copy_from(&(u2 * c));
        // dd/dθ = sin φ·[u₃, 0, −u₁]
        j.fixed_view_mut::<3, 1>(3, 0).copy_from(&(u3 * s));
        j.fixed_view_mut::<3, 1>(3, 2).copy_from(&(-u1 * s));
        j.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-u1 * s));
        j.fixed_view_mut::<3, 1>(3, 3).copy_from(&(u2 * c));
        j
    }
}
