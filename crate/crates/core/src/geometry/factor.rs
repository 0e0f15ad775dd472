use nalgebra::{Matrix2x3, Matrix2x4, Matrix2x6, Matrix3, Matrix3x6, RowVector3, Vector2, Vector3};

use super::camera::{CameraModel, Eye};
use super::line::{LineSegment2D, OrthonormalLine};
use super::pose::{skew, Pose};
use super::{GeometryError, DEGENERATE_LINE_TOL, DEGENERATE_PROJECTION_TOL};

/// Whitened point residual with Jacobians w.r.t. the pose tangent `[v; ω]`
/// and the world point.
#[derive(Debug, Clone, Copy)]
pub struct PointResidual {
    pub residual: Vector2<f64>,
    pub d_pose: Matrix2x6<f64>,
    pub d_point: Matrix2x3<f64>,
}

/// Endpoint-to-line residual (pixels) with Jacobians w.r.t. the pose tangent
/// and the 4-dof line update `[δθ; δφ]`.
#[derive(Debug, Clone, Copy)]
pub struct LineResidual {
    pub residual: Vector2<f64>,
    pub d_pose: Matrix2x6<f64>,
    pub d_line: Matrix2x4<f64>,
}

/// `(π(R·p + t + o) − obs) / σ`, where `o` shifts into the requested eye.
pub fn point_residual(
    pose: &Pose,
    point: &Vector3<f64>,
    observed: &Vector2<f64>,
    sigma: f64,
    cam: &CameraModel,
    eye: Eye,
) -> Result<PointResidual, GeometryError> {
    let rp = pose.rotation() * point;
    let pc = rp + pose.translation() + cam.eye_offset(eye);
    if !(pc[2] > 1e-9) {
        return Err(GeometryError::PointBehindCamera);
    }
    let inv_z = 1.0 / pc[2];
    let residual = (cam.project(&pc) - observed) / sigma;
    let d_proj = Matrix2x3::new(
        cam.fx * inv_z,
        0.0,
        -cam.fx * pc[0] * inv_z * inv_z,
        0.0,
        cam.fy * inv_z,
        -cam.fy * pc[1] * inv_z * inv_z,
    ) / sigma;
    let mut d_pc = Matrix3x6::zeros();
    d_pc.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    d_pc.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&rp)));
    Ok(PointResidual {
        residual,
        d_pose: d_proj * d_pc,
        d_point: d_proj * pose.rotation(),
    })
}

/// Line reprojection residual of a landmark against an observed segment.
pub fn line_residual(
    pose: &Pose,
    line: &OrthonormalLine,
    observed: &LineSegment2D,
    cam: &CameraModel,
    eye: Eye,
) -> Result<LineResidual, GeometryError> {
    let (n_w, d_w) = line.raw();
    let r = pose.rotation();
    let t = pose.translation() + cam.eye_offset(eye);
    let rn = r * n_w;
    let rd = r * d_w;
    let n_c = rn + t.cross(&rd);
    if !(n_c.norm() >= DEGENERATE_PROJECTION_TOL * (n_w.norm() + d_w.norm())) {
        return Err(GeometryError::DegenerateProjection);
    }
    let k_it = cam.intrinsics_inv().transpose();
    let l = k_it * n_c;
    let s2 = l[0] * l[0] + l[1] * l[1];
    if !(s2 >= DEGENERATE_LINE_TOL * n_c.norm_squared()) {
        return Err(GeometryError::DegenerateLine);
    }
    let s = s2.sqrt();
    let ps = observed.start.push(1.0);
    let pe = observed.end.push(1.0);
    let es = ps.dot(&l);
    let ee = pe.dot(&l);
    let residual = Vector2::new(es / s, ee / s);

    let s3 = s * s2;
    let grad = |p: &Vector3<f64>, e: f64| -> RowVector3<f64> {
        RowVector3::new(p[0] / s - e * l[0] / s3, p[1] / s - e * l[1] / s3, p[2] / s)
    };
    let mut d_l = nalgebra::Matrix2x3::zeros();
    d_l.set_row(0, &grad(&ps, es));
    d_l.set_row(1, &grad(&pe, ee));
    let d_nc = d_l * k_it;

    let skew_t = skew(&t);
    let skew_rd = skew(&rd);
    let mut d_nc_pose = Matrix3x6::zeros();
    d_nc_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew_rd));
    d_nc_pose
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-skew(&rn) - skew_t * skew_rd));

    let mut d_nc_plucker = Matrix3x6::zeros();
    d_nc_plucker.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    d_nc_plucker.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew_t * r));

    Ok(LineResidual {
        residual,
        d_pose: d_nc * d_nc_pose,
        d_line: d_nc * d_nc_plucker * line.raw_jacobian(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_line, transform_plucker, PluckerLine};
    use nalgebra::{Vector4, Vector6};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec3(rng: &mut ChaCha8Rng, r: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
    }

    #[test]
    fn zero_residual_at_truth_is_full_rank() {
        let cam = CameraModel::default();
        let pose = Pose::from_axis_angle(Vector3::new(0.05, -0.1, 0.02), Vector3::new(0.1, 0.0, 0.3));
        let truth = PluckerLine::from_points(&Vector3::new(-1.0, 0.3, 5.0), &Vector3::new(0.8, -0.4, 6.0)).unwrap();
        let lc = transform_plucker(&truth, &pose);
        let p = lc.point_at(-0.5);
        let q = lc.point_at(0.5);
        let seg = LineSegment2D::new(cam.project(&p), cam.project(&q));
        let _ = project_line(&lc, &cam).unwrap();
        let ortho = OrthonormalLine::from_plucker(&truth);
        let res = line_residual(&pose, &ortho, &seg, &cam, Eye::Left).unwrap();
        assert!(res.residual.norm() < 1e-9);
        assert_eq!(res.d_line.rank(1e-9), 2);
        assert_eq!(res.d_pose.rank(1e-9), 2);
    }

    #[test]
    fn taylor_remainder_is_second_order() {
        let cam = CameraModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pose = Pose::from_axis_angle(rand_vec3(&mut rng, 0.2), rand_vec3(&mut rng, 0.5));
        let point = pose.inverse().transform_point(&Vector3::new(0.3, -0.2, 4.0));
        let obs = Vector2::new(380.0, 240.0);
        let base = point_residual(&pose, &point, &obs, 1.0, &cam, Eye::Right).unwrap();
        for k in 0..6 {
            let mut errs = Vec::new();
            for h in [1e-3, 5e-4] {
                let mut d = Vector6::zeros();
                d[k] = h;
                let moved = point_residual(&pose.retract(&d), &point, &obs, 1.0, &cam, Eye::Right).unwrap();
                let predicted = base.residual + base.d_pose * d;
                errs.push((moved.residual - predicted).norm());
            }
            // halving the step should cut the remainder by ≈ 4×
            let ratio = errs[0] / errs[1].max(1e-300);
            assert!(errs[0] < 1e-9 || (3.0..5.0).contains(&ratio), "k={k} ratio={ratio}");
        }
    }

    #[test]
    fn line_jacobian_matches_central_differences() {
        let cam = CameraModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..50 {
            let pose = Pose::from_axis_angle(rand_vec3(&mut rng, 0.3), rand_vec3(&mut rng, 1.0));
            let inv = pose.inverse();
            let p = inv.transform_point(&(rand_vec3(&mut rng, 1.5) + Vector3::new(0.0, 0.0, 5.0)));
            let q = inv.transform_point(&(rand_vec3(&mut rng, 1.5) + Vector3::new(0.0, 0.0, 5.0)));
            let line = OrthonormalLine::from_plucker(&PluckerLine::from_points(&p, &q).unwrap());
            let seg = LineSegment2D::new(
                Vector2::new(rng.random_range(0.0..752.0), rng.random_range(0.0..480.0)),
                Vector2::new(rng.random_range(0.0..752.0), rng.random_range(0.0..480.0)),
            );
            let base = line_residual(&pose, &line, &seg, &cam, Eye::Right).unwrap();
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let plus = line_residual(&pose.retract(&d), &line, &seg, &cam, Eye::Right).unwrap();
                let minus = line_residual(&pose.retract(&-d), &line, &seg, &cam, Eye::Right).unwrap();
                let fd = (plus.residual - minus.residual) / (2.0 * h);
                let an = base.d_pose.column(k);
                assert!((fd - an).norm() <= 1e-5 * an.norm().max(1.0));
            }
            for k in 0..4 {
                let mut d = Vector4::zeros();
                d[k] = h;
                let plus = line_residual(&pose, &line.retract(&d), &seg, &cam, Eye::Right).unwrap();
                let minus = line_residual(&pose, &line.retract(&-d), &seg, &cam, Eye::Right).unwrap();
                let fd = (plus.residual - minus.residual) / (2.0 * h);
                let an = base.d_line.column(k);
                assert!((fd - an).norm() <= 1e-5 * an.norm().max(1.0));
            }
        }
    }

    #[test]
    fn point_behind_camera_is_error() {
        let cam = CameraModel::default();
        let res = point_residual(
            &Pose::identity(),
            &Vector3::new(0.0, 0.0, -1.0),
            &Vector2::zeros(),
            1.0,
            &cam,
            Eye::Left,
        );
        assert!(matches!(res, Err(GeometryError::PointBehindCamera)));
    }
}
