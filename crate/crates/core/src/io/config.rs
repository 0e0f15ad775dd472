//! Flat `key = value` run configuration with dotted section keys.
//!
//! Sources are applied in order: defaults, config file, `LINEVO_*`
//! environment variables, command-line flags. The environment name of a key
//! is `LINEVO_` followed by the key in upper case with `.` spelled `__`,
//! e.g. `LINEVO_OT__EPSILON` for `ot.epsilon`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::simulator::{IlluminationEvent, MatcherKind, NoiseSpec, PipelineConfig, SceneSpec, TrajectoryKind, WeightMode};
use crate::weighting::WeightForm;

pub const ENV_PREFIX: &str = "LINEVO_";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("unknown config key `{key}`{}", at_line(*line))]
    UnknownKey { key: String, line: Option<usize> },
    #[error("unknown environment override `{var}`")]
    UnknownEnv { var: String },
    #[error("config key `{key}`: cannot parse `{value}` as {expected}{}", at_line(*line))]
    InvalidValue {
        key: String,
        value: String,
        expected: &'static str,
        line: Option<usize>,
    },
    #[error("config line {line} (byte {offset}): {message}")]
    Syntax { line: usize, offset: usize, message: String },
    #[error("config key `{key}` given twice (lines {first} and {second})")]
    Duplicate { key: String, first: usize, second: usize },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn at_line(line: Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

/// Everything a run needs besides paths.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub noise: NoiseSpec,
    pub pipeline: PipelineConfig,
}

enum Slot<'a> {
    F64(&'a mut f64),
    Usize(&'a mut usize),
    U64(&'a mut u64),
    U32(&'a mut u32),
    Trajectory(&'a mut TrajectoryKind),
    Matcher(&'a mut MatcherKind),
    Weights(&'a mut WeightMode),
    Form(&'a mut WeightForm),
    Illumination(&'a mut Vec<IlluminationEvent>),
}

fn form_name(f: WeightForm) -> &'static str {
    match f {
        WeightForm::VarianceForm => "variance",
        WeightForm::StddevForm => "stddev",
    }
}

fn parse_illumination(value: &str) -> Option<Vec<IlluminationEvent>> {
    value
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let mut it = item.split(':').map(str::trim);
            let ev = IlluminationEvent {
                frame: it.next()?.parse().ok()?,
                gain: it.next()?.parse().ok()?,
                bias: it.next()?.parse().ok()?,
            };
            it.next().is_none().then_some(ev)
        })
        .collect()
}

impl Slot<'_> {
    fn render(&self) -> String {
        match self {
            Slot::F64(v) => format!("{}", **v),
            Slot::Usize(v) => v.to_string(),
            Slot::U64(v) => v.to_string(),
            Slot::U32(v) => v.to_string(),
            Slot::Trajectory(v) => v.name().to_string(),
            Slot::Matcher(v) => v.name().to_string(),
            Slot::Weights(v) => v.name().to_string(),
            Slot::Form(v) => form_name(**v).to_string(),
            Slot::Illumination(events) => {
                let parts: Vec<String> = events.iter().map(|e| format!("{}:{}:{}", e.frame, e.gain, e.bias)).collect();
                parts.join(";")
            }
        }
    }

    /// Returns the expected type on failure.
    fn assign(&mut self, value: &str) -> Result<(), &'static str> {
        match self {
            Slot::F64(v) => **v = value.parse().map_err(|_| "a number")?,
            Slot::Usize(v) => **v = value.parse().map_err(|_| "a non-negative integer")?,
            Slot::U64(v) => **v = value.parse().map_err(|_| "a non-negative integer")?,
            Slot::U32(v) => **v = value.parse().map_err(|_| "a non-negative integer")?,
            Slot::Trajectory(v) => **v = TrajectoryKind::parse(value).ok_or("one of circle, lissajous, corridor")?,
            Slot::Matcher(v) => **v = MatcherKind::parse(value).ok_or("one of ot, nn")?,
            Slot::Weights(v) => **v = WeightMode::parse(value).ok_or("one of adaptive, uniform")?,
            Slot::Form(v) => {
                **v = match value {
                    "variance" => WeightForm::VarianceForm,
                    "stddev" => WeightForm::StddevForm,
                    _ => return Err("one of variance, stddev"),
                }
            }
            Slot::Illumination(v) => {
                **v = parse_illumination(value).ok_or("`frame:gain:bias` items separated by `;`")?
            }
        }
        Ok(())
    }
}

impl RunConfig {
    /// Every key with a handle on its field, in echo order.
    fn slots(&mut self) -> Vec<(&'static str, Slot<'_>)> {
        let s = &mut self.scene;
        let n = &mut self.noise;
        let p = &mut self.pipeline;
        vec![
            ("scene.seed", Slot::U64(&mut s.seed)),
            ("scene.n_points", Slot::Usize(&mut s.n_points)),
            ("scene.n_lines", Slot::Usize(&mut s.n_lines)),
            ("scene.extent", Slot::F64(&mut s.extent)),
            ("scene.texture_density", Slot::F64(&mut s.texture_density)),
            ("scene.trajectory", Slot::Trajectory(&mut s.trajectory)),
            ("scene.n_frames", Slot::Usize(&mut s.n_frames)),
            ("scene.frame_rate", Slot::F64(&mut s.frame_rate)),
            ("noise.pixel_sigma", Slot::F64(&mut n.pixel_sigma)),
            ("noise.detection_dropout", Slot::F64(&mut n.detection_dropout)),
            ("noise.line_dropout", Slot::F64(&mut n.line_dropout)),
            ("noise.descriptor_noise_sigma", Slot::F64(&mut n.descriptor_noise_sigma)),
            ("noise.min_segment_px", Slot::F64(&mut n.min_segment_px)),
            ("noise.duplicate_gap_px", Slot::F64(&mut n.duplicate_gap_px)),
            ("noise.short_line_fraction", Slot::F64(&mut n.short_line_fraction)),
            ("noise.short_line_min_px", Slot::F64(&mut n.short_line_min_px)),
            ("noise.short_line_max_px", Slot::F64(&mut n.short_line_max_px)),
            ("noise.short_line_sigma", Slot::F64(&mut n.short_line_sigma)),
            ("noise.illumination", Slot::Illumination(&mut n.illumination_events)),
            ("camera.fx", Slot::F64(&mut p.camera.fx)),
            ("camera.fy", Slot::F64(&mut p.camera.fy)),
            ("camera.cx", Slot::F64(&mut p.camera.cx)),
            ("camera.cy", Slot::F64(&mut p.camera.cy)),
            ("camera.baseline", Slot::F64(&mut p.camera.baseline)),
            ("camera.width", Slot::U32(&mut p.camera.width)),
            ("camera.height", Slot::U32(&mut p.camera.height)),
            ("descriptor.n_samples", Slot::Usize(&mut p.descriptor.n_samples)),
            ("descriptor.radius", Slot::F64(&mut p.descriptor.radius)),
            ("descriptor.rho_0", Slot::F64(&mut p.descriptor.rho_0)),
            ("features.depth", Slot::Usize(&mut p.features.depth)),
            ("features.scale", Slot::F64(&mut p.features.scale)),
            ("features.falloff_radius", Slot::F64(&mut p.features.falloff_radius)),
            ("features.background_sigma", Slot::F64(&mut p.features.background_sigma)),
            ("ot.tau", Slot::F64(&mut p.ot.tau)),
            ("ot.epsilon", Slot::F64(&mut p.ot.epsilon)),
            ("ot.eta", Slot::F64(&mut p.ot.eta)),
            ("ot.delta", Slot::F64(&mut p.ot.delta)),
            ("ot.max_iters", Slot::Usize(&mut p.ot.max_iters)),
            ("ot.tol", Slot::F64(&mut p.ot.tol)),
            ("weights.sigma_base", Slot::F64(&mut p.weights.sigma_base)),
            ("weights.kappa", Slot::F64(&mut p.weights.kappa)),
            ("weights.lambda", Slot::F64(&mut p.weights.lambda)),
            ("weights.w_min", Slot::F64(&mut p.weights.w_min)),
            ("weights.tau_trk", Slot::U32(&mut p.weights.tau_trk)),
            ("weights.form", Slot::Form(&mut p.weights.form)),
            ("solver.max_iterations", Slot::Usize(&mut p.solver.max_iterations)),
            ("solver.initial_damping", Slot::F64(&mut p.solver.initial_damping)),
            ("solver.relative_decrease_tol", Slot::F64(&mut p.solver.relative_decrease_tol)),
            ("solver.gradient_tol", Slot::F64(&mut p.solver.gradient_tol)),
            ("solver.huber_delta_px", Slot::F64(&mut p.solver.huber_delta_px)),
            ("solver.max_damping", Slot::F64(&mut p.solver.max_damping)),
            ("pipeline.matcher", Slot::Matcher(&mut p.matcher)),
            ("pipeline.weight_mode", Slot::Weights(&mut p.weight_mode)),
            ("pipeline.window_size", Slot::Usize(&mut p.window_size)),
            ("pipeline.keyframe_interval", Slot::Usize(&mut p.keyframe_interval)),
            ("pipeline.max_depth", Slot::F64(&mut p.max_depth)),
            ("pipeline.min_epipolar_angle", Slot::F64(&mut p.min_epipolar_angle)),
            ("pipeline.point_sigma", Slot::F64(&mut p.point_sigma)),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().slots().into_iter().map(|(k, _)| k).collect()
    }

    fn set_at(&mut self, key: &str, value: &str, line: Option<usize>) -> Result<(), ConfigError> {
        let mut slots = self.slots();
        let Some((_, slot)) = slots.iter_mut().find(|(k, _)| *k == key) else {
            return Err(ConfigError::UnknownKey { key: key.to_string(), line });
        };
        slot.assign(value).map_err(|expected| ConfigError::InvalidValue {
            key: key.to_string(),
            value: value.to_string(),
            expected,
            line,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_at(key, value, None)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let mut copy = self.clone();
        let slots = copy.slots();
        slots.iter().find(|(k, _)| *k == key).map(|(_, s)| s.render())
    }

    /// Applies `key = value` lines. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen: Vec<(String, usize)> = Vec::new();
        let mut offset = 0;
        for (idx, raw) in text.split_inclusive('\n').enumerate() {
            let line_no = idx + 1;
            let start = offset;
            offset += raw.len();
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    offset: start,
                    message: "expected `key = value`".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
                return Err(ConfigError::Duplicate {
                    key: key.to_string(),
                    first: *first,
                    second: line_no,
                });
            }
            self.set_at(key, value, Some(line_no))?;
            seen.push((key.to_string(), line_no));
        }
        Ok(())
    }

    /// Applies `LINEVO_*` variables; anything else is ignored.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let known: BTreeSet<&str> = RunConfig::keys().into_iter().collect();
        let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (var, value) in vars {
            let key = var[ENV_PREFIX.len()..].to_lowercase().replace("__", ".");
            if !known.contains(key.as_str()) {
                return Err(ConfigError::UnknownEnv { var });
            }
            self.set(&key, value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: crate::simulator::SimulatorError| ConfigError::Invalid(e.to_string());
        self.scene.validate().map_err(wrap)?;
        self.noise.validate().map_err(wrap)?;
        self.pipeline.validate().map_err(wrap)?;
        Ok(())
    }

    /// Every key with its resolved value; reading it back gives `self`.
    pub fn to_text(&self) -> String {
        let mut copy = self.clone();
        let mut out = String::new();
        for (key, slot) in copy.slots() {
            let _ = writeln!(out, "{key} = {}", slot.render());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }
}
