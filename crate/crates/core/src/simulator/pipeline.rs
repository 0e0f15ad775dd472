use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::{DVector, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::features::{synth_feature_maps, FeatureSpec};
use super::render::{render_frame, EyeObservation, FrameObservation};
use super::{generate_scene, stream_rng, NoiseSpec, Scene, SceneSpec, SimulatorError, DOMAIN_DESCRIPTOR};
use crate::association::{associate_lines, nearest_neighbor_match, MatchSet, OtConfig};
use crate::descriptor::{build_descriptor, DescriptorConfig, LineDescriptor};
use crate::evaluation::{match_counts, MatchCounts, Trajectory};
use crate::geometry::{triangulate_line_stereo, triangulate_point_stereo, CameraModel, Eye, LineSegment2D, PluckerLine, Pose};
use crate::optimizer::{
    marginal_window_update, optimize, FactorGraph, KeyframeInsert, LineFactor, PointFactor, SolverConfig,
};
use crate::weighting::{line_weight, line_weights, LineTrack, WeightConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatcherKind {
    #[default]
    Ot,
    Nn,
}

impl MatcherKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Ot => "ot",
            Self::Nn => "nn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ot" => Some(Self::Ot),
            "nn" => Some(Self::Nn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    #[default]
    Adaptive,
    Uniform,
}

impl WeightMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Adaptive => "adaptive",
            Self::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adaptive" => Some(Self::Adaptive),
            "uniform" => Some(Self::Uniform),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub camera: CameraModel,
    pub descriptor: DescriptorConfig,
    pub ot: OtConfig,
    pub weights: WeightConfig,
    pub solver: SolverConfig,
    pub features: FeatureSpec,
    pub matcher: MatcherKind,
    pub weight_mode: WeightMode,
    pub window_size: usize,
    /// Every k-th frame is a keyframe.
    pub keyframe_interval: usize,
    /// Triangulations deeper than this are rejected, meters.
    pub max_depth: f64,
    /// Stereo line segments closer than this to the horizontal epipolar direction are not triangulated, rad.
    pub min_epipolar_angle: f64,
    /// Keypoint measurement standard deviation, px.
    pub point_sigma: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            camera: CameraModel::default(),
            descriptor: DescriptorConfig::default(),
            ot: OtConfig::default(),
            weights: WeightConfig::default(),
            solver: SolverConfig::default(),
            features: FeatureSpec::default(),
            matcher: MatcherKind::Ot,
            weight_mode: WeightMode::Adaptive,
            window_size: 10,
            keyframe_interval: 1,
            max_depth: 40.0,
            min_epipolar_angle: 0.35,
            point_sigma: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        let wrap = |e: String| SimulatorError::InvalidConfig(e);
        self.camera.validate().map_err(|e| wrap(e.to_string()))?;
        self.descriptor.validate().map_err(|e| wrap(e.to_string()))?;
        self.ot.validate().map_err(|e| wrap(e.to_string()))?;
        self.weights.validate().map_err(|e| wrap(e.to_string()))?;
        self.solver.validate().map_err(|e| wrap(e.to_string()))?;
        self.features.validate()?;
        if self.window_size < 2 {
            return Err(wrap("window_size must be at least 2".into()));
        }
        if self.keyframe_interval < 1 {
            return Err(wrap("keyframe_interval must be at least 1".into()));
        }
        if !(self.max_depth > 0.0) || !(self.min_epipolar_angle >= 0.0) || !(self.point_sigma > 0.0) {
            return Err(wrap("max_depth, min_epipolar_angle and point_sigma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchLog {
    pub frame_a: usize,
    pub frame_b: usize,
    /// `(i, j, confidence)` into the described segments of each frame.
    pub pairs: Vec<(usize, usize, f64)>,
    pub ids_a: Vec<u64>,
    pub ids_b: Vec<u64>,
    pub counts: MatchCounts,
    pub non_converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightLogEntry {
    pub i: usize,
    pub j: usize,
    pub confidence: f64,
    pub weight: f64,
    pub length: f64,
    pub n_obs: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightLog {
    pub frame: usize,
    pub entries: Vec<WeightLogEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FailureCounts {
    pub descriptor: usize,
    pub point_triangulation: usize,
    pub line_triangulation: usize,
    pub association_warnings: usize,
    pub association_errors: usize,
    pub weight_errors: usize,
    pub optimizer_errors: usize,
    pub optimizer_not_converged: usize,
}

/// Accumulated wall time per stage, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub render_ms: f64,
    pub describe_ms: f64,
    pub associate_ms: f64,
    pub optimize_ms: f64,
    pub total_ms: f64,
    pub frames: usize,
}

impl StageTimings {
    pub fn mean_frame_ms(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            self.total_ms / self.frames as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub scene: Scene,
    /// Camera-to-world poses.
    pub estimated: Trajectory,
    pub ground_truth: Trajectory,
    pub match_logs: Vec<MatchLog>,
    pub weight_logs: Vec<WeightLog>,
    pub failures: FailureCounts,
    pub timings: StageTimings,
    pub optimized_windows: usize,
    pub converged_windows: usize,
}

impl PipelineOutput {
    pub fn match_totals(&self) -> MatchCounts {
        let mut total = MatchCounts::default();
        for log in &self.match_logs {
            total.add(&log.counts);
        }
        total
    }
}

/// Adds isotropic noise to a descriptor and renormalizes it.
pub fn perturb_descriptor<R: Rng>(desc: &mut LineDescriptor, sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    let noise = DVector::from_iterator(desc.vector.len(), (0..desc.vector.len()).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)));
    desc.vector += noise;
    let n = desc.vector.norm();
    if n > 0.0 {
        desc.vector /= n;
    }
}

/// Left-eye segments that produced a descriptor, with their descriptors and
/// ground-truth ids. The number of failed segments is returned last.
pub fn describe_frame(
    scene: &Scene,
    obs: &FrameObservation,
    pose: &Pose,
    cfg: &PipelineConfig,
    noise: &NoiseSpec,
) -> Result<(Vec<LineSegment2D>, Vec<LineDescriptor>, Vec<u64>, usize), SimulatorError> {
    let maps = synth_feature_maps(scene, obs.frame, pose, &cfg.camera, Eye::Left, &cfg.features, noise)?;
    let keypoints: Vec<Vector2<f64>> = obs.left.keypoint_positions();
    let mut rng = stream_rng(scene.spec.seed, DOMAIN_DESCRIPTOR, obs.frame as u64);
    let mut segs = Vec::new();
    let mut descs = Vec::new();
    let mut ids = Vec::new();
    let mut failed = 0;
    for seg in &obs.left.lines {
        match build_descriptor(&maps.line, &maps.point, seg, &keypoints, &cfg.descriptor) {
            Ok(mut d) => {
                perturb_descriptor(&mut d, noise.descriptor_noise_sigma, &mut rng);
                segs.push(*seg);
                descs.push(d);
                ids.push(seg.track_id.expect("rendered segments carry ids"));
            }
            Err(_) => failed += 1,
        }
    }
    Ok((segs, descs, ids, failed))
}

fn run_matcher(
    matcher: MatcherKind,
    segs_a: &[LineSegment2D],
    segs_b: &[LineSegment2D],
    descs_a: &[LineDescriptor],
    descs_b: &[LineDescriptor],
    ot: &OtConfig,
) -> Result<MatchSet, SimulatorError> {
    match matcher {
        MatcherKind::Ot => {
            associate_lines(segs_a, segs_b, descs_a, descs_b, ot).map_err(|e| SimulatorError::InvalidConfig(e.to_string()))
        }
        MatcherKind::Nn => Ok(nearest_neighbor_match(descs_a, descs_b)),
    }
}

fn make_log(frame_a: usize, frame_b: usize, ms: &MatchSet, ids_a: Vec<u64>, ids_b: Vec<u64>) -> MatchLog {
    MatchLog {
        frame_a,
        frame_b,
        pairs: ms.pairs.iter().map(|p| (p.i, p.j, p.confidence)).collect(),
        counts: match_counts(ms, &ids_a, &ids_b),
        ids_a,
        ids_b,
        non_converged: ms.warning.is_some(),
    }
}

/// Renders two frames of a scene at their true poses, describes the left
/// eye of each and matches A against B.
pub fn match_frame_pair(
    scene: &Scene,
    frame_a: usize,
    frame_b: usize,
    cfg: &PipelineConfig,
    noise: &NoiseSpec,
) -> Result<MatchLog, SimulatorError> {
    let side = |k: usize| -> Result<_, SimulatorError> {
        let obs = render_frame(scene, k, &scene.poses[k], &cfg.camera, noise);
        describe_frame(scene, &obs, &scene.poses[k], cfg, noise)
    };
    let (segs_a, descs_a, ids_a, _) = side(frame_a)?;
    let (segs_b, descs_b, ids_b, _) = side(frame_b)?;
    let ms = run_matcher(cfg.matcher, &segs_a, &segs_b, &descs_a, &descs_b, &cfg.ot)?;
    Ok(make_log(frame_a, frame_b, &ms, ids_a, ids_b))
}

#[derive(Debug, Clone)]
struct KeyframeLines {
    frame: usize,
    segs: Vec<LineSegment2D>,
    descs: Vec<LineDescriptor>,
    ids: Vec<u64>,
    landmarks: Vec<Option<u64>>,
}

#[derive(Debug, Clone)]
struct State {
    graph: FactorGraph,
    previous: Option<KeyframeLines>,
    /// Keyframes each line landmark has been observed in.
    tracks: BTreeMap<u64, u32>,
    next_line_id: u64,
}

struct StepResult {
    pose: Pose,
    match_log: Option<MatchLog>,
    weight_log: WeightLog,
    converged: Option<bool>,
}

fn line_is_valid(line_c: &PluckerLine, seg: &LineSegment2D, right: &LineSegment2D, cfg: &PipelineConfig) -> bool {
    let cam = &cfg.camera;
    // near-horizontal segments run along the epipolar lines and carry no disparity
    let min_sin = cfg.min_epipolar_angle.sin();
    if [seg, right].iter().any(|s| (s.end[1] - s.start[1]).abs() < min_sin * s.length) {
        return false;
    }
    [seg.start, seg.end].iter().all(|uv| {
        line_c
            .closest_point_to_ray(&cam.backproject(uv))
            .is_some_and(|p| p[2] > 0.0 && p[2] <= cfg.max_depth)
    })
}

impl State {
    fn step(
        &mut self,
        scene: &Scene,
        frame: usize,
        predicted: Pose,
        window: usize,
        cfg: &PipelineConfig,
        noise: &NoiseSpec,
        failures: &mut FailureCounts,
        timings: &mut StageTimings,
    ) -> Result<StepResult, SimulatorError> {
        let cam = &cfg.camera;
        let truth = scene.poses[frame];
        let clock = Instant::now();
        let obs = render_frame(scene, frame, &truth, cam, noise);
        timings.render_ms += clock.elapsed().as_secs_f64() * 1e3;

        let clock = Instant::now();
        let (segs, descs, ids, failed) = describe_frame(scene, &obs, &truth, cfg, noise)?;
        failures.descriptor += failed;
        timings.describe_ms += clock.elapsed().as_secs_f64() * 1e3;

        let clock = Instant::now();
        let mut landmarks: Vec<Option<u64>> = vec![None; segs.len()];
        let mut match_log = None;
        let mut matches = MatchSet::default();
        if let Some(prev) = &self.previous {
            match run_matcher(cfg.matcher, &prev.segs, &segs, &prev.descs, &descs, &cfg.ot) {
                Ok(ms) => {
                    if ms.warning.is_some() {
                        failures.association_warnings += 1;
                    }
                    let mut order: Vec<_> = ms.pairs.clone();
                    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.i.cmp(&b.i)));
                    let mut taken = BTreeSet::new();
                    for p in &order {
                        if let Some(lid) = prev.landmarks[p.i] {
                            if landmarks[p.j].is_none() && self.graph.line(lid).is_some() && taken.insert(lid) {
                                landmarks[p.j] = Some(lid);
                            }
                        }
                    }
                    match_log = Some(make_log(prev.frame, frame, &ms, prev.ids.clone(), ids.clone()));
                    matches = ms;
                }
                Err(_) => failures.association_errors += 1,
            }
        }
        timings.associate_ms += clock.elapsed().as_secs_f64() * 1e3;

        let world_from_cam = predicted.inverse();
        let mut insert = KeyframeInsert {
            pose_id: frame as u64,
            pose: predicted,
            ..KeyframeInsert::default()
        };

        // points: temporal and stereo correspondence by id
        let right_points: BTreeMap<u64, Vector2<f64>> = obs.right.keypoints.iter().map(|k| (k.id, k.uv)).collect();
        let point_factor = |id: u64, eye: Eye, uv: Vector2<f64>| PointFactor {
            pose_id: frame as u64,
            point_id: id,
            eye,
            observed: uv,
            sigma: cfg.point_sigma,
            robust_delta: cfg.solver.huber_delta_px,
        };
        for kp in &obs.left.keypoints {
            let right = right_points.get(&kp.id);
            if !self.graph.points().contains_key(&kp.id) {
                let Some(p_c) = right.and_then(|r| triangulate_point_stereo(&kp.uv, r, cam, cfg.max_depth)) else {
                    failures.point_triangulation += usize::from(right.is_some());
                    continue;
                };
                insert.new_points.push((kp.id, world_from_cam.transform_point(&p_c)));
            }
            insert.point_factors.push(point_factor(kp.id, Eye::Left, kp.uv));
            if let Some(r) = right {
                insert.point_factors.push(point_factor(kp.id, Eye::Right, *r));
            }
        }

        // lines: temporal correspondence from the matcher, stereo by id
        let right_lines: BTreeMap<u64, LineSegment2D> =
            obs.right.lines.iter().map(|l| (l.track_id.expect("rendered segments carry ids"), *l)).collect();
        for (j, seg) in segs.iter().enumerate() {
            let right = right_lines.get(&ids[j]);
            let lid = match landmarks[j] {
                Some(lid) => {
                    *self.tracks.entry(lid).or_insert(0) += 1;
                    lid
                }
                None => {
                    let Some(r) = right else { continue };
                    let tri = triangulate_line_stereo(seg, r, cam).ok().filter(|l| line_is_valid(l, seg, r, cfg));
                    let Some(line_c) = tri else {
                        failures.line_triangulation += 1;
                        continue;
                    };
                    let lid = self.next_line_id;
                    self.next_line_id += 1;
                    insert.new_lines.push((lid, line_c.transform(&world_from_cam)));
                    self.tracks.insert(lid, 1);
                    landmarks[j] = Some(lid);
                    lid
                }
            };
            for (eye, observed) in [(Eye::Left, Some(seg)), (Eye::Right, right)] {
                if let Some(observed) = observed {
                    insert.line_factors.push(LineFactor {
                        pose_id: frame as u64,
                        line_id: lid,
                        eye,
                        observed: *observed,
                        weight: 1.0,
                        robust_delta: cfg.solver.huber_delta_px,
                    });
                }
            }
        }

        marginal_window_update(&mut self.graph, insert, window).map_err(|e| SimulatorError::InvalidConfig(e.to_string()))?;
        // landmarks left with too little support when the window slid are gone
        for lm in landmarks.iter_mut() {
            if lm.is_some_and(|lid| self.graph.line(lid).is_none()) {
                *lm = None;
            }
        }
        self.tracks.retain(|lid, _| self.graph.line(*lid).is_some());

        let mut weight_log = WeightLog {
            frame,
            entries: Vec::new(),
        };
        if cfg.weight_mode == WeightMode::Adaptive {
            for f in self.graph.line_factors_mut() {
                let n_obs = self.tracks.get(&f.line_id).copied().unwrap_or(1);
                f.weight = line_weight(f.observed.length, n_obs, &cfg.weights);
            }
        }
        let tracks: BTreeMap<usize, LineTrack> = landmarks
            .iter()
            .enumerate()
            .filter_map(|(j, lm)| {
                lm.map(|lid| {
                    (
                        j,
                        LineTrack {
                            track_id: lid,
                            n_obs: self.tracks[&lid],
                            latest_start: segs[j].start,
                            latest_end: segs[j].end,
                        },
                    )
                })
            })
            .collect();
        let logged = MatchSet {
            pairs: matches.pairs.iter().filter(|p| tracks.contains_key(&p.j)).copied().collect(),
            ..MatchSet::default()
        };
        match line_weights(&logged, &tracks, &cfg.weights) {
            Ok(ws) => {
                weight_log.entries = ws
                    .iter()
                    .map(|w| WeightLogEntry {
                        i: w.i,
                        j: w.j,
                        confidence: w.confidence,
                        weight: if cfg.weight_mode == WeightMode::Adaptive { w.weight } else { 1.0 },
                        length: segs[w.j].length,
                        n_obs: tracks[&w.j].n_obs,
                    })
                    .collect();
            }
            Err(_) => failures.weight_errors += 1,
        }

        let clock = Instant::now();
        let mut converged = None;
        match optimize(&self.graph, &cfg.solver) {
            Ok((g, report)) => {
                self.graph = g;
                if !report.converged {
                    failures.optimizer_not_converged += 1;
                }
                converged = Some(report.converged);
            }
            Err(_) => failures.optimizer_errors += 1,
        }
        timings.optimize_ms += clock.elapsed().as_secs_f64() * 1e3;

        self.previous = Some(KeyframeLines {
            frame,
            segs,
            descs,
            ids,
            landmarks,
        });
        Ok(StepResult {
            pose: *self.graph.pose(frame as u64).expect("pose just inserted"),
            match_log,
            weight_log,
            converged,
        })
    }
}

/// One frame of stored detections for [`window_graph`].
#[derive(Debug, Clone, Copy)]
pub struct WindowFrame<'a> {
    pub pose_id: u64,
    /// World-to-camera initial guess.
    pub pose: Pose,
    pub left: &'a EyeObservation,
    pub right: &'a EyeObservation,
}

/// Bundle-adjustment problem over a set of frames whose detections carry
/// landmark ids. Landmarks are triangulated in the first frame that sees
/// them in both eyes; the first frame is held fixed. Returns the graph and
/// the number of landmarks that could not be initialized.
pub fn window_graph(frames: &[WindowFrame<'_>], cfg: &PipelineConfig) -> (FactorGraph, usize) {
    let cam = &cfg.camera;
    let mut graph = FactorGraph::new(*cam);
    let mut line_landmarks: BTreeMap<u64, u32> = BTreeMap::new();
    let mut rejected = BTreeSet::new();
    for f in frames {
        graph.add_pose(f.pose_id, f.pose);
        let world_from_cam = f.pose.inverse();
        let right_points: BTreeMap<u64, Vector2<f64>> = f.right.keypoints.iter().map(|k| (k.id, k.uv)).collect();
        for kp in &f.left.keypoints {
            let right = right_points.get(&kp.id);
            if !graph.points().contains_key(&kp.id) {
                match right.and_then(|r| triangulate_point_stereo(&kp.uv, r, cam, cfg.max_depth)) {
                    Some(p_c) => graph.add_point(kp.id, world_from_cam.transform_point(&p_c)),
                    None => {
                        rejected.insert((false, kp.id));
                        continue;
                    }
                }
            }
            rejected.remove(&(false, kp.id));
            for (eye, uv) in [(Eye::Left, Some(&kp.uv)), (Eye::Right, right)] {
                if let Some(uv) = uv {
                    graph.add_point_factor(PointFactor {
                        pose_id: f.pose_id,
                        point_id: kp.id,
                        eye,
                        observed: *uv,
                        sigma: cfg.point_sigma,
                        robust_delta: cfg.solver.huber_delta_px,
                    });
                }
            }
        }
        let right_lines: BTreeMap<u64, LineSegment2D> =
            f.right.lines.iter().filter_map(|l| l.track_id.map(|id| (id, *l))).collect();
        for seg in &f.left.lines {
            let Some(id) = seg.track_id else { continue };
            let right = right_lines.get(&id);
            if !line_landmarks.contains_key(&id) {
                let tri = right.and_then(|r| {
                    triangulate_line_stereo(seg, r, cam).ok().filter(|l| line_is_valid(l, seg, r, cfg))
                });
                let Some(line_c) = tri else {
                    rejected.insert((true, id));
                    continue;
                };
                graph.add_line(id, &line_c.transform(&world_from_cam));
                line_landmarks.insert(id, 0);
            }
            rejected.remove(&(true, id));
            *line_landmarks.get_mut(&id).expect("inserted above") += 1;
            for (eye, observed) in [(Eye::Left, Some(seg)), (Eye::Right, right)] {
                if let Some(observed) = observed {
                    graph.add_line_factor(LineFactor {
                        pose_id: f.pose_id,
                        line_id: id,
                        eye,
                        observed: *observed,
                        weight: 1.0,
                        robust_delta: cfg.solver.huber_delta_px,
                    });
                }
            }
        }
    }
    if cfg.weight_mode == WeightMode::Adaptive {
        for f in graph.line_factors_mut() {
            f.weight = line_weight(f.observed.length, line_landmarks[&f.line_id], &cfg.weights);
        }
    }
    if let Some(first) = frames.first() {
        graph.fix_pose(first.pose_id);
    }
    (graph, rejected.len())
}

/// Full stereo odometry run on a generated scene.
///
/// The first pose is taken from ground truth and anchors the gauge; later
/// poses start from a constant-velocity prediction. Stage failures are
/// counted and the run continues.
pub fn run_pipeline(spec: &SceneSpec, noise: &NoiseSpec, cfg: &PipelineConfig) -> Result<PipelineOutput, SimulatorError> {
    noise.validate()?;
    cfg.validate()?;
    let scene = generate_scene(spec)?;
    let mut state = State {
        graph: FactorGraph::new(cfg.camera),
        previous: None,
        tracks: BTreeMap::new(),
        next_line_id: 0,
    };
    let mut failures = FailureCounts::default();
    let mut timings = StageTimings::default();
    let mut match_logs = Vec::new();
    let mut weight_logs = Vec::new();
    let mut latest: Vec<Pose> = Vec::with_capacity(spec.n_frames);
    let mut optimized_windows = 0;
    let mut converged_windows = 0;
    let mut final_poses: BTreeMap<u64, Pose> = BTreeMap::new();

    for frame in 0..spec.n_frames {
        let clock = Instant::now();
        let predicted = match latest.len() {
            0 => scene.poses[0],
            1 => latest[0],
            n => latest[n - 1].compose(&latest[n - 2].inverse()).compose(&latest[n - 1]),
        };
        let keyframe = frame % cfg.keyframe_interval == 0;
        let result = if keyframe {
            let r = state.step(&scene, frame, predicted, cfg.window_size, cfg, noise, &mut failures, &mut timings)?;
            for (id, p) in state.graph.poses() {
                final_poses.insert(*id, *p);
            }
            r
        } else {
            let mut trial = state.clone();
            let r = trial.step(&scene, frame, predicted, cfg.window_size + 1, cfg, noise, &mut failures, &mut timings)?;
            final_poses.insert(frame as u64, r.pose);
            r
        };
        if let Some(c) = result.converged {
            optimized_windows += 1;
            converged_windows += usize::from(c);
        }
        if keyframe {
            match_logs.extend(result.match_log);
            weight_logs.push(result.weight_log);
        }
        latest.push(result.pose);
        timings.total_ms += clock.elapsed().as_secs_f64() * 1e3;
        timings.frames += 1;
    }

    let mut estimated = Trajectory::default();
    let mut ground_truth = Trajectory::default();
    for frame in 0..spec.n_frames {
        let t = scene.stamps[frame];
        estimated.push(t, final_poses[&(frame as u64)].inverse()).expect("increasing stamps");
        ground_truth.push(t, scene.poses[frame].inverse()).expect("increasing stamps");
    }
    Ok(PipelineOutput {
        scene,
        estimated,
        ground_truth,
        match_logs,
        weight_logs,
        failures,
        timings,
        optimized_windows,
        converged_windows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::ate_rmse;

    #[test]
    fn self_match_is_identity() {
        let cfg = PipelineConfig::default();
        for seed in 0..5 {
            let scene = generate_scene(&SceneSpec { seed, ..SceneSpec::default() }).unwrap();
            for frame in [0, 50, 99] {
                let log = match_frame_pair(&scene, frame, frame, &cfg, &NoiseSpec::default()).unwrap();
                assert!(log.counts.possible > 0);
                assert_eq!(log.counts.precision(), 1.0, "seed {seed} frame {frame}");
                assert_eq!(log.counts.recall(), 1.0, "seed {seed} frame {frame}: {:?}", log.counts);
            }
        }
    }

    #[test]
    fn noise_free_run_is_exact() {
        let spec = SceneSpec { n_frames: 40, ..SceneSpec::default() };
        let out = run_pipeline(&spec, &NoiseSpec::noise_free(), &PipelineConfig::default()).unwrap();
        let ate_m = ate_rmse(&out.estimated, &out.ground_truth).unwrap() / 100.0;
        assert!(ate_m <= 1e-4, "{ate_m}");
        assert_eq!(out.match_totals().precision(), 1.0);
    }

    #[test]
    fn line_dropout_falls_back_to_points() {
        let spec = SceneSpec { n_frames: 20, ..SceneSpec::default() };
        let noise = NoiseSpec { line_dropout: 1.0, ..NoiseSpec::default() };
        let out = run_pipeline(&spec, &noise, &PipelineConfig::default()).unwrap();
        assert!(out.match_logs.iter().all(|l| l.pairs.is_empty()));
        let ate = ate_rmse(&out.estimated, &out.ground_truth).unwrap();
        assert!(ate.is_finite());
    }

    #[test]
    fn rejects_invalid_config() {
        let cfg = PipelineConfig { window_size: 1, ..PipelineConfig::default() };
        assert!(run_pipeline(&SceneSpec::default(), &NoiseSpec::default(), &cfg).is_err());
    }

    #[test]
    fn keyframe_interval_runs() {
        let spec = SceneSpec { n_frames: 12, ..SceneSpec::default() };
        let cfg = PipelineConfig { keyframe_interval: 3, ..PipelineConfig::default() };
        let out = run_pipeline(&spec, &NoiseSpec::noise_free(), &cfg).unwrap();
        assert_eq!(out.estimated.len(), 12);
        assert_eq!(out.weight_logs.len(), 4);
        let ate_m = ate_rmse(&out.estimated, &out.ground_truth).unwrap() / 100.0;
        assert!(ate_m <= 1e-4, "{ate_m}");
    }
}
