use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use super::{stream_rng, NoiseSpec, Scene, DOMAIN_RENDER, DOMAIN_SHORT_LINE};
use crate::geometry::{CameraModel, Eye, LineSegment2D, Pose};

/// Points closer than this to the eye plane are not rendered, meters.
pub const NEAR_PLANE_M: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub id: u64,
    pub uv: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EyeObservation {
    pub keypoints: Vec<Keypoint>,
    /// Every segment carries its ground-truth line id as `track_id`.
    pub lines: Vec<LineSegment2D>,
}

impl EyeObservation {
    pub fn keypoint_positions(&self) -> Vec<Vector2<f64>> {
        self.keypoints.iter().map(|k| k.uv).collect()
    }

    pub fn line_ids(&self) -> Vec<u64> {
        self.lines.iter().map(|l| l.track_id.expect("rendered segments carry ids")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub frame: usize,
    pub timestamp: f64,
    pub left: EyeObservation,
    pub right: EyeObservation,
}

impl FrameObservation {
    pub fn eye(&self, eye: Eye) -> &EyeObservation {
        match eye {
            Eye::Left => &self.left,
            Eye::Right => &self.right,
        }
    }
}

/// World-to-eye transform for a left-eye pose.
pub fn eye_pose(pose: &Pose, cam: &CameraModel, eye: Eye) -> Pose {
    Pose::from_rotation(*pose.rotation3(), pose.translation() + cam.eye_offset(eye))
}

/// Liang–Barsky clipping of `p → q` against `[lo, hi]`.
pub fn clip_segment_to_rect(
    p: &Vector2<f64>,
    q: &Vector2<f64>,
    lo: &Vector2<f64>,
    hi: &Vector2<f64>,
) -> Option<(Vector2<f64>, Vector2<f64>)> {
    let d = q - p;
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (pk, qk) in [
        (-d[0], p[0] - lo[0]),
        (d[0], hi[0] - p[0]),
        (-d[1], p[1] - lo[1]),
        (d[1], hi[1] - p[1]),
    ] {
        if pk == 0.0 {
            if qk < 0.0 {
                return None;
            }
        } else {
            let r = qk / pk;
            if pk < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then(|| (p + d * t0, p + d * t1))
}

fn image_bounds(cam: &CameraModel) -> (Vector2<f64>, Vector2<f64>) {
    (
        Vector2::zeros(),
        Vector2::new(cam.width as f64 - 1.0, cam.height as f64 - 1.0),
    )
}

/// Noise-free image of a 3D segment in one eye after near-plane and image
/// clipping. `world_to_eye` already includes the eye offset.
pub fn visible_segment(
    start: &Vector3<f64>,
    end: &Vector3<f64>,
    world_to_eye: &Pose,
    cam: &CameraModel,
) -> Option<(Vector2<f64>, Vector2<f64>)> {
    let mut a = world_to_eye.transform_point(start);
    let mut b = world_to_eye.transform_point(end);
    if a[2] < NEAR_PLANE_M && b[2] < NEAR_PLANE_M {
        return None;
    }
    if a[2] < NEAR_PLANE_M {
        a = b + (a - b) * ((b[2] - NEAR_PLANE_M) / (b[2] - a[2]));
    } else if b[2] < NEAR_PLANE_M {
        b = a + (b - a) * ((a[2] - NEAR_PLANE_M) / (a[2] - b[2]));
    }
    let (lo, hi) = image_bounds(cam);
    clip_segment_to_rect(&cam.project(&a), &cam.project(&b), &lo, &hi)
}

fn is_short_line(scene: &Scene, id: u64, noise: &NoiseSpec) -> bool {
    noise.short_line_fraction > 0.0
        && stream_rng(scene.spec.seed, DOMAIN_SHORT_LINE, id).random::<f64>() < noise.short_line_fraction
}

fn clamp_to_image(p: Vector2<f64>, cam: &CameraModel) -> Vector2<f64> {
    let (lo, hi) = image_bounds(cam);
    Vector2::new(p[0].clamp(lo[0], hi[0]), p[1].clamp(lo[1], hi[1]))
}

fn gaussian2(rng: &mut ChaCha8Rng, sigma: f64) -> Vector2<f64> {
    if sigma == 0.0 {
        return Vector2::zeros();
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    Vector2::new(rng.sample(n), rng.sample(n))
}

fn render_eye(
    scene: &Scene,
    world_to_eye: &Pose,
    cam: &CameraModel,
    noise: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> EyeObservation {
    let mut out = EyeObservation::default();
    for p in &scene.points {
        let pc = world_to_eye.transform_point(&p.position);
        // draws are made for every point so that visibility does not shift the stream
        let jitter = gaussian2(rng, noise.pixel_sigma);
        let dropped = rng.random::<f64>() < noise.detection_dropout;
        if pc[2] < NEAR_PLANE_M {
            continue;
        }
        let uv = cam.project(&pc);
        if !cam.in_image(&uv) || dropped {
            continue;
        }
        let noisy = uv + jitter;
        if cam.in_image(&noisy) {
            out.keypoints.push(Keypoint { id: p.id, uv: noisy });
        }
    }
    // visible extents first: duplicate suppression works on clean geometry
    let mut visible: Vec<(usize, Vector2<f64>, Vector2<f64>)> = Vec::new();
    let mut draws = Vec::with_capacity(scene.lines.len());
    for (k, l) in scene.lines.iter().enumerate() {
        let j_start = gaussian2(rng, noise.pixel_sigma);
        let j_end = gaussian2(rng, noise.pixel_sigma);
        let s_start = gaussian2(rng, noise.short_line_sigma);
        let s_end = gaussian2(rng, noise.short_line_sigma);
        let frag_len = rng.random_range(noise.short_line_min_px..=noise.short_line_max_px);
        let frag_pos: f64 = rng.random();
        let dropped = rng.random::<f64>() < noise.line_dropout;
        draws.push((j_start, j_end, s_start, s_end, frag_len, frag_pos, dropped));
        if let Some((a, b)) = visible_segment(&l.start, &l.end, world_to_eye, cam) {
            visible.push((k, a, b));
        }
    }
    let keep = suppress_duplicates(&visible, noise.duplicate_gap_px);
    for (&(k, a, b), kept) in visible.iter().zip(keep) {
        let (j_start, j_end, s_start, s_end, frag_len, frag_pos, dropped) = draws[k];
        if !kept || dropped {
            continue;
        }
        let id = scene.lines[k].id;
        let full = (b - a).norm();
        let (start, end) = if is_short_line(scene, id, noise) {
            if full < frag_len {
                continue;
            }
            let dir = (b - a) / full;
            let s0 = frag_pos * (full - frag_len);
            (a + dir * s0 + s_start, a + dir * (s0 + frag_len) + s_end)
        } else {
            (a + j_start, b + j_end)
        };
        let seg = LineSegment2D::new(clamp_to_image(start, cam), clamp_to_image(end, cam)).with_track_id(id);
        if seg.length >= noise.min_segment_px.max(1.0) {
            out.lines.push(seg);
        }
    }
    out
}

fn point_to_segment(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let d = b - a;
    let len2 = d.norm_squared();
    let s = if len2 > 0.0 { ((p - a).dot(&d) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + d * s)).norm()
}

/// A detector reports one segment where several projections coincide: a
/// segment with at least half its length within `gap_px` of a longer kept
/// one is dropped.
fn suppress_duplicates(visible: &[(usize, Vector2<f64>, Vector2<f64>)], gap_px: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..visible.len()).collect();
    let len = |k: usize| (visible[k].2 - visible[k].1).norm();
    order.sort_by(|&x, &y| len(y).total_cmp(&len(x)).then(x.cmp(&y)));
    let mut keep = vec![false; visible.len()];
    let mut kept: Vec<usize> = Vec::new();
    for k in order {
        let (_, a, b) = visible[k];
        let duplicate = kept.iter().any(|&m| {
            let (_, ma, mb) = visible[m];
            let close = (0..=8)
                .filter(|s| point_to_segment(&(a + (b - a) * (*s as f64 / 8.0)), &ma, &mb) < gap_px)
                .count();
            close >= 5
        });
        if !duplicate {
            keep[k] = true;
            kept.push(k);
        }
    }
    keep
}

/// Projects the scene into both eyes of the rig at `pose` (world-to-left-eye).
pub fn render_frame(
    scene: &Scene,
    frame: usize,
    pose: &Pose,
    cam: &CameraModel,
    noise: &NoiseSpec,
) -> FrameObservation {
    let mut rng = stream_rng(scene.spec.seed, DOMAIN_RENDER, frame as u64);
    let left = render_eye(scene, &eye_pose(pose, cam, Eye::Left), cam, noise, &mut rng);
    let right = render_eye(scene, &eye_pose(pose, cam, Eye::Right), cam, noise, &mut rng);
    FrameObservation {
        frame,
        timestamp: scene.stamps.get(frame).copied().unwrap_or(frame as f64 / scene.spec.frame_rate),
        left,
        right,
    }
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scene, SceneLine, SceneSpec, TrajectoryKind};
    use super::*;
    use crate::geometry::{line_reprojection_residual, project_line, PluckerLine};
    use crate::geometry::triangulate_point_stereo;

    fn scene() -> Scene {
        generate_scene(&SceneSpec::default()).unwrap()
    }

    #[test]
    fn noise_free_reprojects_exactly() {
        let scene = scene();
        let cam = CameraModel::default();
        let noise = NoiseSpec { min_segment_px: 1.0, ..NoiseSpec::noise_free() };
        let mut n_kp = 0;
        let mut n_ln = 0;
        for frame in [0, 37, 99] {
            let pose = scene.poses[frame];
            let obs = render_frame(&scene, frame, &pose, &cam, &noise);
            for eye in [Eye::Left, Eye::Right] {
                let t = eye_pose(&pose, &cam, eye);
                for kp in &obs.eye(eye).keypoints {
                    let p = scene.point(kp.id).unwrap();
                    assert!((cam.project(&t.transform_point(&p.position)) - kp.uv).norm() < 1e-6);
                    n_kp += 1;
                }
                for seg in &obs.eye(eye).lines {
                    let l = scene.line(seg.track_id.unwrap()).unwrap();
                    let line_c = PluckerLine::from_points(&l.start, &l.end).unwrap().transform(&t);
                    let r = line_reprojection_residual(&project_line(&line_c, &cam).unwrap(), seg).unwrap();
                    assert!(r.norm() < 1e-6, "{r}");
                    n_ln += 1;
                }
            }
        }
        assert!(n_kp > 50 && n_ln > 5, "{n_kp} {n_ln}");
    }

    #[test]
    fn every_id_exists() {
        let scene = scene();
        let cam = CameraModel::default();
        let obs = render_frame(&scene, 5, &scene.poses[5], &cam, &NoiseSpec::default());
        for eye in [Eye::Left, Eye::Right] {
            assert!(obs.eye(eye).keypoints.iter().all(|k| scene.point(k.id).is_some()));
            assert!(obs.eye(eye).line_ids().iter().all(|id| scene.line(*id).is_some()));
        }
    }

    #[test]
    fn behind_camera_is_culled() {
        let mut scene = scene();
        let cam = CameraModel::default();
        let pose = scene.poses[0];
        let c = pose.center();
        let back = pose.inverse().transform_point(&Vector3::new(0.0, 0.0, -2.0));
        scene.points.clear();
        scene.points.push(super::super::ScenePoint { id: 0, position: back });
        scene.lines = vec![SceneLine { id: 0, start: back, end: back + (back - c) }];
        let obs = render_frame(&scene, 0, &pose, &cam, &NoiseSpec::noise_free());
        assert!(obs.left.keypoints.is_empty() && obs.left.lines.is_empty());
        assert!(obs.right.keypoints.is_empty() && obs.right.lines.is_empty());
    }

    #[test]
    fn deterministic_rendering() {
        let scene = scene();
        let cam = CameraModel::default();
        let noise = NoiseSpec { detection_dropout: 0.3, line_dropout: 0.2, ..NoiseSpec::default() };
        let a = render_frame(&scene, 11, &scene.poses[11], &cam, &noise);
        let b = render_frame(&scene, 11, &scene.poses[11], &cam, &noise);
        assert_eq!(a, b);
    }

    /// Dense sampling of the projected segment; the visible sub-range must
    /// agree with the clipped endpoints.
    #[test]
    fn clipping_matches_sampling_oracle() {
        let cam = CameraModel::default();
        let pose = Pose::identity();
        // spans from far left of the image to inside it
        let start = Vector3::new(-6.0, 0.3, 4.0);
        let end = Vector3::new(0.5, -0.2, 4.0);
        let (a, b) = visible_segment(&start, &end, &pose, &cam).unwrap();
        let pa = cam.project(&start);
        let pb = cam.project(&end);
        let (lo, hi) = (Vector2::zeros(), Vector2::new(751.0, 479.0));
        let inside = |p: &Vector2<f64>| (0..2).all(|c| p[c] >= lo[c] && p[c] <= hi[c]);
        let n = 200_000;
        let ts: Vec<f64> = (0..=n)
            .map(|k| k as f64 / n as f64)
            .filter(|t| inside(&(pa + (pb - pa) * *t)))
            .collect();
        let first = pa + (pb - pa) * ts[0];
        let last = pa + (pb - pa) * ts[ts.len() - 1];
        let step = (pb - pa).norm() / n as f64;
        assert!((first - a).norm() <= step + 1e-9);
        assert!((last - b).norm() <= step + 1e-9);
        assert!((b - a).norm() < (pb - pa).norm());
    }

    #[test]
    fn clipped_line_keeps_id() {
        let mut scene = scene();
        let cam = CameraModel::default();
        let pose = Pose::identity();
        scene.lines = vec![SceneLine { id: 0, start: Vector3::new(-6.0, 0.3, 4.0), end: Vector3::new(0.5, -0.2, 4.0) }];
        let obs = render_frame(&scene, 0, &pose, &cam, &NoiseSpec::noise_free());
        let seg = obs.left.lines[0];
        assert_eq!(seg.track_id, Some(0));
        let full = (cam.project(&scene.lines[0].start) - cam.project(&scene.lines[0].end)).norm();
        assert!(seg.length < full);
    }

    #[test]
    fn near_plane_clip() {
        let cam = CameraModel::default();
        let (a, _) = visible_segment(
            &Vector3::new(0.0, 0.0, -1.0),
            &Vector3::new(0.0, 0.0, 5.0),
            &Pose::identity(),
            &cam,
        )
        .unwrap();
        // the clipped start sits on the near plane at the principal point
        assert!((a - Vector2::new(cam.cx, cam.cy)).norm() < 1e-9);
    }

    #[test]
    fn rect_clip_cases() {
        let lo = Vector2::new(0.0, 0.0);
        let hi = Vector2::new(10.0, 10.0);
        let inside = clip_segment_to_rect(&Vector2::new(1.0, 1.0), &Vector2::new(9.0, 2.0), &lo, &hi).unwrap();
        assert_eq!(inside, (Vector2::new(1.0, 1.0), Vector2::new(9.0, 2.0)));
        assert!(clip_segment_to_rect(&Vector2::new(-5.0, -1.0), &Vector2::new(20.0, -1.0), &lo, &hi).is_none());
        let (a, b) = clip_segment_to_rect(&Vector2::new(-10.0, 5.0), &Vector2::new(20.0, 5.0), &lo, &hi).unwrap();
        assert_eq!((a, b), (Vector2::new(0.0, 5.0), Vector2::new(10.0, 5.0)));
    }

    #[test]
    fn short_fragments() {
        let scene = scene();
        let cam = CameraModel::default();
        let noise = NoiseSpec { short_line_fraction: 1.0, min_segment_px: 1.0, ..NoiseSpec::noise_free() };
        let obs = render_frame(&scene, 3, &scene.poses[3], &cam, &noise);
        assert!(!obs.left.lines.is_empty());
        // 8 px endpoint noise on a ≤30 px fragment stays well below 80 px
        assert!(obs.left.lines.iter().all(|l| l.length < 80.0));
    }

    #[test]
    fn low_texture_corridor() {
        let spec = SceneSpec {
            trajectory: TrajectoryKind::Corridor,
            texture_density: 0.05,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec).unwrap();
        let cam = CameraModel::default();
        let noise = NoiseSpec::default();
        let sparse = (0..spec.n_frames)
            .filter(|&k| {
                let obs = render_frame(&scene, k, &scene.poses[k], &cam, &noise);
                let valid = obs
                    .left
                    .keypoints
                    .iter()
                    .filter(|l| {
                        obs.right
                            .keypoints
                            .iter()
                            .find(|r| r.id == l.id)
                            .and_then(|r| triangulate_point_stereo(&l.uv, &r.uv, &cam, 40.0))
                            .is_some()
                    })
                    .count();
                valid < 20
            })
            .count();
        assert!(sparse as f64 >= 0.8 * spec.n_frames as f64);
    }
}
