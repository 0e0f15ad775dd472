//! Deterministic synthetic stereo world: scenes, trajectories, rendered
//! detections, procedural feature maps and the end-to-end pipeline.
//!
//! Every random draw comes from a `ChaCha8Rng` seeded with the scene seed
//! and a stream number `(domain << 40) | index`, so any frame can be
//! rendered on its own and results do not depend on evaluation order.

mod features;
mod pipeline;
mod render;
mod suites;

pub use features::{landmark_signature, synth_feature_maps, FeatureMaps, FeatureSpec};
pub use pipeline::{
    describe_frame, match_frame_pair, perturb_descriptor, run_pipeline, FailureCounts, MatchLog, MatcherKind,
    PipelineConfig, PipelineOutput, StageTimings, WeightLog, WeightLogEntry, WeightMode, window_graph, WindowFrame,
};
pub use suites::{AmbiguitySuite, AmbiguityTrial, ShortLineRun, ShortLineSuite};
pub use render::{clip_segment_to_rect, eye_pose, render_frame, visible_segment, EyeObservation, FrameObservation, Keypoint};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulatorError {
    #[error("invalid scene spec: {0}")]
    InvalidScene(&'static str),
    #[error("invalid noise spec: {0}")]
    InvalidNoise(&'static str),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrajectoryKind {
    #[default]
    Circle,
    Lissajous,
    Corridor,
}

impl TrajectoryKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Lissajous => "lissajous",
            Self::Corridor => "corridor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "circle" => Some(Self::Circle),
            "lissajous" => Some(Self::Lissajous),
            "corridor" => Some(Self::Corridor),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
/// Landmark counts are given for the room box (`2e × 2e × e`); other boxes
/// scale points by volume and lines by surface area, so densities stay put.
pub struct SceneSpec {
    pub seed: u64,
    pub n_points: usize,
    pub n_lines: usize,
    /// Half-width of the room, meters.
    pub extent: f64,
    /// Scales the point count.
    pub texture_density: f64,
    pub trajectory: TrajectoryKind,
    pub n_frames: usize,
    pub frame_rate: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_points: 1000,
            n_lines: 300,
            extent: 5.0,
            texture_density: 1.0,
            trajectory: TrajectoryKind::Circle,
            n_frames: 100,
            frame_rate: 20.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if self.n_frames < 2 {
            return Err(SimulatorError::InvalidScene("n_frames must be at least 2"));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(SimulatorError::InvalidScene("extent must be positive"));
        }
        if !(0.0..=1.0).contains(&self.texture_density) {
            return Err(SimulatorError::InvalidScene("texture_density must lie in [0, 1]"));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(SimulatorError::InvalidScene("frame_rate must be positive"));
        }
        Ok(())
    }

    /// Half-extents of the enclosing box along world x, y, z (z up).
    pub fn box_half_extents(&self) -> Vector3<f64> {
        let e = self.extent;
        match self.trajectory {
            TrajectoryKind::Corridor => Vector3::new(1.5 * e, 0.3 * e, 0.25 * e),
            _ => Vector3::new(e, e, 0.5 * e),
        }
    }

    /// `(points, lines)` actually placed in the scene box.
    pub fn landmark_counts(&self) -> (usize, usize) {
        let h = self.box_half_extents();
        let e = self.extent;
        let volume = h[0] * h[1] * h[2] / (0.5 * e * e * e);
        let area = (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]) / (2.0 * e * e);
        (
            (self.n_points as f64 * self.texture_density * volume).round() as usize,
            (self.n_lines as f64 * area).round() as usize,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IlluminationEvent {
    pub frame: usize,
    pub gain: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    /// Isotropic keypoint and endpoint noise, px.
    pub pixel_sigma: f64,
    /// Per-eye keypoint dropout probability.
    pub detection_dropout: f64,
    /// Per-eye line dropout probability.
    pub line_dropout: f64,
    /// Events persist from their frame on and compose in order.
    pub illumination_events: Vec<IlluminationEvent>,
    /// Gaussian noise added to descriptors before renormalization.
    pub descriptor_noise_sigma: f64,
    /// Detector minimum segment length, px.
    pub min_segment_px: f64,
    /// Segments closer than this to a longer one are reported once, px.
    pub duplicate_gap_px: f64,
    /// Fraction of line landmarks only ever detected as short fragments.
    pub short_line_fraction: f64,
    pub short_line_min_px: f64,
    pub short_line_max_px: f64,
    /// Endpoint noise of short fragments, px.
    pub short_line_sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            detection_dropout: 0.0,
            line_dropout: 0.0,
            illumination_events: Vec::new(),
            descriptor_noise_sigma: 0.0,
            min_segment_px: 40.0,
            duplicate_gap_px: 12.0,
            short_line_fraction: 0.0,
            short_line_min_px: 15.0,
            short_line_max_px: 30.0,
            short_line_sigma: 8.0,
        }
    }
}

impl NoiseSpec {
    pub fn noise_free() -> Self {
        Self {
            pixel_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimulatorError> {
        for (p, what) in [
            (self.detection_dropout, "detection_dropout must lie in [0, 1]"),
            (self.line_dropout, "line_dropout must lie in [0, 1]"),
            (self.short_line_fraction, "short_line_fraction must lie in [0, 1]"),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimulatorError::InvalidNoise(what));
            }
        }
        for (s, what) in [
            (self.pixel_sigma, "pixel_sigma must be non-negative"),
            (self.descriptor_noise_sigma, "descriptor_noise_sigma must be non-negative"),
            (self.short_line_sigma, "short_line_sigma must be non-negative"),
            (self.min_segment_px, "min_segment_px must be non-negative"),
            (self.duplicate_gap_px, "duplicate_gap_px must be non-negative"),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(SimulatorError::InvalidNoise(what));
            }
        }
        if !(self.short_line_min_px > 0.0 && self.short_line_min_px <= self.short_line_max_px) {
            return Err(SimulatorError::InvalidNoise("short line lengths must satisfy 0 < min ≤ max"));
        }
        if self.illumination_events.iter().any(|e| !(e.gain > 0.0) || !e.bias.is_finite()) {
            return Err(SimulatorError::InvalidNoise("illumination gain must be positive"));
        }
        Ok(())
    }

    /// Composite `(gain, bias)` in effect at a frame.
    pub fn illumination_at(&self, frame: usize) -> (f64, f64) {
        let mut events: Vec<&IlluminationEvent> = self.illumination_events.iter().filter(|e| e.frame <= frame).collect();
        events.sort_by_key(|e| e.frame);
        events.iter().fold((1.0, 0.0), |(g, b), e| (e.gain * g, e.gain * b + e.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePoint {
    pub id: u64,
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneLine {
    pub id: u64,
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub points: Vec<ScenePoint>,
    pub lines: Vec<SceneLine>,
    /// World-to-camera pose of the left eye, one per frame.
    pub poses: Vec<Pose>,
    pub stamps: Vec<f64>,
}

impl Scene {
    pub fn point(&self, id: u64) -> Option<&ScenePoint> {
        self.points.get(id as usize).filter(|p| p.id == id)
    }

    pub fn line(&self, id: u64) -> Option<&SceneLine> {
        self.lines.get(id as usize).filter(|l| l.id == id)
    }
}

pub(crate) const DOMAIN_SCENE: u64 = 1;
pub(crate) const DOMAIN_RENDER: u64 = 2;
pub(crate) const DOMAIN_SHORT_LINE: u64 = 3;
pub(crate) const DOMAIN_SIGNATURE_LINE: u64 = 4;
pub(crate) const DOMAIN_SIGNATURE_POINT: u64 = 5;
pub(crate) const DOMAIN_BACKGROUND: u64 = 6;
pub(crate) const DOMAIN_DESCRIPTOR: u64 = 7;
pub(crate) const DOMAIN_SUITE: u64 = 8;

pub(crate) fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 40) | (index & ((1 << 40) - 1)));
    rng
}

/// Camera-to-world rotation for a camera looking along `forward` with the
/// image y axis pointing as far down (−z) as possible.
fn look_rotation(forward: &Vector3<f64>) -> Rotation3<f64> {
    let z_c = forward.normalize();
    let down = Vector3::new(0.0, 0.0, -1.0);
    let x_c = down.cross(&z_c).normalize();
    let y_c = z_c.cross(&x_c);
    Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x_c, y_c, z_c]))
}

/// Camera-to-world pose at time `t`.
pub fn trajectory_pose(spec: &SceneSpec, t: f64) -> Pose {
    let e = spec.extent;
    let (position, forward) = match spec.trajectory {
        TrajectoryKind::Circle => {
            let th = 0.3 * t;
            let pos = Vector3::new(0.4 * e * th.cos(), 0.4 * e * th.sin(), 0.02 * e * (2.0 * t).sin());
            let yaw = th + 0.15 * (0.7 * t).sin();
            (pos, Vector3::new(yaw.cos(), yaw.sin(), 0.0))
        }
        TrajectoryKind::Lissajous => {
            let pos = Vector3::new(
                0.35 * e * (0.5 * t).sin(),
                0.35 * e * (0.7 * t + 0.6).sin(),
                0.05 * e * (0.9 * t).sin(),
            );
            let yaw = 0.25 * t + 0.5 * (0.3 * t).sin();
            let pitch = 0.05 * t.sin();
            (pos, Vector3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin()))
        }
        TrajectoryKind::Corridor => {
            let half = spec.box_half_extents();
            let duration = spec.n_frames as f64 / spec.frame_rate;
            let speed = (1.6 * half[0] / duration).min(1.0);
            let pos = Vector3::new(-0.8 * half[0] + speed * t, 0.1 * half[1] * (0.8 * t).sin(), 0.0);
            let yaw = 0.05 * (0.6 * t).sin();
            (pos, Vector3::new(yaw.cos(), yaw.sin(), 0.0))
        }
    };
    Pose::from_rotation(look_rotation(&forward), position)
}

fn uniform_in_box(rng: &mut ChaCha8Rng, half: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-half[0]..half[0]),
        rng.random_range(-half[1]..half[1]),
        rng.random_range(-half[2]..half[2]),
    )
}

/// Keeps landmarks away from the camera path.
const CLEARANCE_M: f64 = 0.5;
/// Minimum distance between scene lines as a fraction of the extent.
/// Closer lines splat overlapping signatures and become indistinguishable.
const LINE_SEPARATION: f64 = 0.1;
const MAX_GAP_HALVINGS: usize = 3;

fn point_segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let d = b - a;
    let len2 = d.norm_squared();
    let s = if len2 > 0.0 { ((p - a).dot(&d) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + d * s)).norm()
}

/// Distance between two segments, sampled along each at 1/32 spacing.
fn segment_gap(a0: &Vector3<f64>, a1: &Vector3<f64>, b0: &Vector3<f64>, b1: &Vector3<f64>) -> f64 {
    let n = 32;
    let mut best = f64::INFINITY;
    for k in 0..=n {
        let t = k as f64 / n as f64;
        best = best
            .min(point_segment_distance(&(a0 + (a1 - a0) * t), b0, b1))
            .min(point_segment_distance(&(b0 + (b1 - b0) * t), a0, a1));
    }
    best
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, SimulatorError> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, DOMAIN_SCENE, 0);
    let half = spec.box_half_extents();

    let stamps: Vec<f64> = (0..spec.n_frames).map(|k| k as f64 / spec.frame_rate).collect();
    let cam_to_world: Vec<Pose> = stamps.iter().map(|t| trajectory_pose(spec, *t)).collect();
    let centers: Vec<Vector3<f64>> = cam_to_world.iter().map(|p| *p.translation()).collect();

    let (n_points, n_lines) = spec.landmark_counts();
    let mut points = Vec::with_capacity(n_points);
    while points.len() < n_points {
        let p = uniform_in_box(&mut rng, &half);
        if centers.iter().all(|c| (c - p).norm() >= CLEARANCE_M) {
            points.push(ScenePoint {
                id: points.len() as u64,
                position: p,
            });
        }
    }

    // faces weighted by area
    let faces: Vec<(usize, f64, f64)> = (0..3)
        .flat_map(|axis| {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let area = half[u] * half[v];
            [(axis, -1.0, area), (axis, 1.0, area)]
        })
        .collect();
    let total_area: f64 = faces.iter().map(|f| f.2).sum();
    let mut lines: Vec<SceneLine> = Vec::with_capacity(n_lines);
    let min_gap = LINE_SEPARATION * spec.extent;
    let mut attempts = 0usize;
    while lines.len() < n_lines {
        let k = lines.len();
        attempts += 1;
        let mut pick = rng.random_range(0.0..total_area);
        let mut face = faces[faces.len() - 1];
        for f in &faces {
            if pick < f.2 {
                face = *f;
                break;
            }
            pick -= f.2;
        }
        let (axis, sign, _) = face;
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut center = Vector3::zeros();
        center[axis] = sign * half[axis];
        center[u] = rng.random_range(-0.9 * half[u]..0.9 * half[u]);
        center[v] = rng.random_range(-0.9 * half[v]..0.9 * half[v]);
        let angle: f64 = if k % 2 == 0 {
            if rng.random_bool(0.5) { 0.0 } else { std::f64::consts::FRAC_PI_2 }
        } else {
            rng.random_range(0.0..std::f64::consts::PI)
        };
        let mut dir = Vector3::zeros();
        dir[u] = angle.cos();
        dir[v] = angle.sin();
        let length = rng.random_range(0.5..2.0) * spec.extent / 5.0;
        // shrink symmetrically until both ends lie on the face
        let mut reach = 0.5 * length;
        for c in [u, v] {
            if dir[c].abs() > 1e-12 {
                reach = reach.min((half[c] - center[c].abs()) / dir[c].abs());
            }
        }
        let (start, end) = (center - dir * reach, center + dir * reach);
        // crowded boxes relax the gap in halves, then give up on it
        let relax = attempts / (20 * n_lines);
        let gap = min_gap * 0.5f64.powi(relax as i32);
        if relax > MAX_GAP_HALVINGS || lines.iter().all(|l| segment_gap(&start, &end, &l.start, &l.end) >= gap) {
            lines.push(SceneLine { id: k as u64, start, end });
        }
    }

    Ok(Scene {
        spec: *spec,
        points,
        lines,
        poses: cam_to_world.iter().map(|p| p.inverse()).collect(),
        stamps,
    })
}
