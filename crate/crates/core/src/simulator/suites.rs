//! Seeded experiment suites shared by the CLI and the acceptance tests.

use rand::Rng;

use super::pipeline::{match_frame_pair, run_pipeline, MatcherKind, PipelineConfig, WeightMode};
use super::{generate_scene, stream_rng, NoiseSpec, SceneSpec, SimulatorError, TrajectoryKind, DOMAIN_SUITE};
use crate::evaluation::{ate_rmse, MatchCounts};

/// Frame pairs with perturbed descriptors and missing lines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbiguitySuite {
    pub n_pairs: usize,
    pub descriptor_noise_sigma: f64,
    pub line_dropout: f64,
    /// Frame B follows frame A by 1..=max_gap frames.
    pub max_gap: usize,
}

impl Default for AmbiguitySuite {
    fn default() -> Self {
        Self {
            n_pairs: 100,
            descriptor_noise_sigma: 0.05,
            line_dropout: 0.2,
            max_gap: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbiguityTrial {
    pub seed: u64,
    pub frame_a: usize,
    pub frame_b: usize,
    pub counts: MatchCounts,
}

impl AmbiguitySuite {
    pub fn noise(&self, base: &NoiseSpec) -> NoiseSpec {
        NoiseSpec {
            descriptor_noise_sigma: self.descriptor_noise_sigma,
            line_dropout: self.line_dropout,
            ..base.clone()
        }
    }

    /// Trial `k` uses scene seed `base.seed + k`; the frame pair is drawn
    /// from that seed, so both matchers see identical instances.
    pub fn run(
        &self,
        base: &SceneSpec,
        noise: &NoiseSpec,
        cfg: &PipelineConfig,
        matcher: MatcherKind,
    ) -> Result<Vec<AmbiguityTrial>, SimulatorError> {
        if base.n_frames <= self.max_gap || self.max_gap == 0 {
            return Err(SimulatorError::InvalidConfig("suite needs n_frames > max_gap ≥ 1".into()));
        }
        let noise = self.noise(noise);
        let cfg = PipelineConfig { matcher, ..*cfg };
        (0..self.n_pairs as u64)
            .map(|k| {
                let spec = SceneSpec { seed: base.seed + k, ..*base };
                let mut rng = stream_rng(spec.seed, DOMAIN_SUITE, 0);
                let gap = rng.random_range(1..=self.max_gap);
                let frame_a = rng.random_range(0..spec.n_frames - gap);
                let scene = generate_scene(&spec)?;
                let log = match_frame_pair(&scene, frame_a, frame_a + gap, &cfg, &noise)?;
                Ok(AmbiguityTrial {
                    seed: spec.seed,
                    frame_a,
                    frame_b: frame_a + gap,
                    counts: log.counts,
                })
            })
            .collect()
    }
}

/// Corridor runs where a share of the lines is only seen as short, noisy
/// fragments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShortLineSuite {
    pub n_seeds: usize,
    pub short_line_fraction: f64,
    /// Detector length cutoff, low enough to keep the fragments.
    pub min_segment_px: f64,
}

impl Default for ShortLineSuite {
    fn default() -> Self {
        Self {
            n_seeds: 20,
            short_line_fraction: 0.5,
            min_segment_px: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShortLineRun {
    pub seed: u64,
    pub ate_cm: f64,
    pub counts: MatchCounts,
    pub mean_frame_ms: f64,
}

impl ShortLineSuite {
    pub fn noise(&self, base: &NoiseSpec) -> NoiseSpec {
        NoiseSpec {
            short_line_fraction: self.short_line_fraction,
            min_segment_px: self.min_segment_px,
            ..base.clone()
        }
    }

    /// Run `k` uses seed `base.seed + k` on the corridor trajectory.
    pub fn run(
        &self,
        base: &SceneSpec,
        noise: &NoiseSpec,
        cfg: &PipelineConfig,
        weight_mode: WeightMode,
    ) -> Result<Vec<ShortLineRun>, SimulatorError> {
        let noise = self.noise(noise);
        let cfg = PipelineConfig { weight_mode, ..*cfg };
        (0..self.n_seeds as u64)
            .map(|k| {
                let spec = SceneSpec {
                    seed: base.seed + k,
                    trajectory: TrajectoryKind::Corridor,
                    ..*base
                };
                let out = run_pipeline(&spec, &noise, &cfg)?;
                let ate_cm = ate_rmse(&out.estimated, &out.ground_truth)
                    .map_err(|e| SimulatorError::InvalidConfig(e.to_string()))?;
                Ok(ShortLineRun {
                    seed: spec.seed,
                    ate_cm,
                    counts: out.match_totals(),
                    mean_frame_ms: out.timings.mean_frame_ms(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ambiguity_trials_are_paired() {
        let suite = AmbiguitySuite { n_pairs: 3, ..AmbiguitySuite::default() };
        let base = SceneSpec::default();
        let cfg = PipelineConfig::default();
        let ot = suite.run(&base, &NoiseSpec::default(), &cfg, MatcherKind::Ot).unwrap();
        let nn = suite.run(&base, &NoiseSpec::default(), &cfg, MatcherKind::Nn).unwrap();
        for (a, b) in ot.iter().zip(&nn) {
            assert_eq!((a.seed, a.frame_a, a.frame_b), (b.seed, b.frame_a, b.frame_b));
            assert_eq!(a.counts.possible, b.counts.possible);
            assert!(a.frame_b > a.frame_a && a.frame_b - a.frame_a <= suite.max_gap);
        }
    }

    #[test]
    fn short_fragments_survive_the_detector() {
        let suite = ShortLineSuite::default();
        let noise = suite.noise(&NoiseSpec::default());
        assert!(noise.min_segment_px < noise.short_line_min_px);
        assert_eq!(noise.short_line_fraction, 0.5);
    }
}
