use nalgebra::{DVector, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::render::{eye_pose, visible_segment, NEAR_PLANE_M};
use super::{
    stream_rng, NoiseSpec, Scene, SimulatorError, DOMAIN_BACKGROUND, DOMAIN_SIGNATURE_LINE, DOMAIN_SIGNATURE_POINT,
};
use crate::descriptor::FeatureMap;
use crate::geometry::{CameraModel, Eye, Pose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureSpec {
    pub depth: usize,
    /// Feature cells per image pixel.
    pub scale: f64,
    /// Gaussian falloff standard deviation, feature px.
    pub falloff_radius: f64,
    /// Standard deviation of the near-Gaussian background texture.
    pub background_sigma: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            depth: 16,
            scale: 0.5,
            falloff_radius: 4.0,
            background_sigma: 0.02,
        }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if self.depth < 4 {
            return Err(SimulatorError::InvalidConfig("feature depth must be at least 4".into()));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(SimulatorError::InvalidConfig("feature scale must lie in (0, 1]".into()));
        }
        if !(self.falloff_radius > 0.0) || !(self.background_sigma >= 0.0) {
            return Err(SimulatorError::InvalidConfig("falloff radius and background sigma must be positive".into()));
        }
        Ok(())
    }

    /// Grid size `(height, width)` covering every image pixel.
    pub fn grid(&self, cam: &CameraModel) -> (usize, usize) {
        let cells = |n: u32| ((n as f64 - 1.0) * self.scale).floor() as usize + 1;
        (cells(cam.height), cells(cam.width))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub line: FeatureMap,
    pub point: FeatureMap,
}

/// Unit channel signature seeded by the landmark id.
pub fn landmark_signature(seed: u64, is_line: bool, id: u64, depth: usize) -> DVector<f64> {
    let domain = if is_line { DOMAIN_SIGNATURE_LINE } else { DOMAIN_SIGNATURE_POINT };
    let mut rng = stream_rng(seed, domain, id);
    let v = DVector::from_iterator(depth, (0..depth).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let n = v.norm();
    v / n
}

fn segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let d = b - a;
    let len2 = d.norm_squared();
    let s = if len2 > 0.0 { ((p - a).dot(&d) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + d * s)).norm()
}

/// Pixel-major accumulator; transposed to channel-major at the end.
struct Canvas {
    depth: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn splat(&mut self, a: &Vector2<f64>, b: &Vector2<f64>, sig: &DVector<f64>, radius: f64) {
        let reach = 3.0 * radius;
        let d = b - a;
        let sig: Vec<f32> = sig.iter().map(|v| *v as f32).collect();
        let y0 = (a[1].min(b[1]) - reach).floor().max(0.0) as usize;
        let y1 = ((a[1].max(b[1]) + reach).ceil().max(0.0) as usize).min(self.height - 1);
        for y in y0..=y1 {
            // part of the segment within `reach` rows, widened by `reach`
            let yf = y as f64;
            let (t0, t1) = if d[1].abs() < 1e-12 {
                (0.0, 1.0)
            } else {
                let ta = (yf - reach - a[1]) / d[1];
                let tb = (yf + reach - a[1]) / d[1];
                (ta.min(tb).max(0.0), ta.max(tb).min(1.0))
            };
            if t0 > t1 {
                continue;
            }
            let xa = a[0] + d[0] * t0;
            let xb = a[0] + d[0] * t1;
            let x0 = (xa.min(xb) - reach).floor().max(0.0) as usize;
            let x1 = ((xa.max(xb) + reach).ceil().max(0.0) as usize).min(self.width - 1);
            for x in x0..=x1 {
                let dist = segment_distance(&Vector2::new(x as f64, yf), a, b);
                if dist > reach {
                    continue;
                }
                let w = (-0.5 * (dist / radius).powi(2)).exp() as f32;
                let cell = (y * self.width + x) * self.depth;
                for (acc, s) in self.data[cell..cell + self.depth].iter_mut().zip(&sig) {
                    *acc += w * s;
                }
            }
        }
    }
}

/// Procedural two-branch feature maps for one eye of a frame.
///
/// Lines are splatted into the line branch along their visible projection,
/// points into the point branch around their projection. Both sit on
/// low-amplitude Gaussian background noise, and the composite illumination
/// gain/bias of the frame is applied last.
pub fn synth_feature_maps(
    scene: &Scene,
    frame: usize,
    pose: &Pose,
    cam: &CameraModel,
    eye: Eye,
    spec: &FeatureSpec,
    noise: &NoiseSpec,
) -> Result<FeatureMaps, SimulatorError> {
    spec.validate()?;
    let (height, width) = spec.grid(cam);
    let t = eye_pose(pose, cam, eye);
    let seed = scene.spec.seed;
    let blank = || Canvas {
        depth: spec.depth,
        height,
        width,
        data: vec![0.0; spec.depth * height * width],
    };

    let mut line = blank();
    for l in &scene.lines {
        if let Some((a, b)) = visible_segment(&l.start, &l.end, &t, cam) {
            let sig = landmark_signature(seed, true, l.id, spec.depth);
            line.splat(&(a * spec.scale), &(b * spec.scale), &sig, spec.falloff_radius);
        }
    }
    let mut point = blank();
    for p in &scene.points {
        let pc = t.transform_point(&p.position);
        if pc[2] < NEAR_PLANE_M {
            continue;
        }
        let uv = cam.project(&pc);
        if cam.in_image(&uv) {
            let sig = landmark_signature(seed, false, p.id, spec.depth);
            let f = uv * spec.scale;
            point.splat(&f, &f, &sig, spec.falloff_radius);
        }
    }

    let (gain, bias) = noise.illumination_at(frame);
    let eye_index = match eye {
        Eye::Left => 0,
        Eye::Right => 1,
    };
    let (gain, bias) = (gain as f32, bias as f32);
    let bg_scale = (spec.background_sigma * 3.0f64.sqrt()) as f32;
    let finish = |canvas: Canvas, branch: u64| {
        let mut rng = stream_rng(seed, DOMAIN_BACKGROUND, 4 * frame as u64 + 2 * eye_index + branch);
        let plane = height * width;
        let mut data = vec![0.0f32; canvas.data.len()];
        for (cell, values) in canvas.data.chunks_exact(canvas.depth).enumerate() {
            for (c, v) in values.iter().enumerate() {
                // sum of four 16-bit uniforms: zero mean, unit variance after scaling
                let bits: u64 = rng.random();
                let u = (0..4).map(|q| ((bits >> (16 * q)) & 0xffff) as f32).sum::<f32>() / 65536.0 - 2.0;
                data[c * plane + cell] = gain * (v + bg_scale * u) + bias;
            }
        }
        FeatureMap::new(spec.depth, height, width, spec.scale, data).expect("grid sized from spec")
    };
    Ok(FeatureMaps {
        line: finish(line, 0),
        point: finish(point, 1),
    })
}
