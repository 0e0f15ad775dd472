//! Reliability weights for line factors: a geometric term driven by segment
//! length and a visibility term driven by track persistence.

use std::collections::BTreeMap;

use nalgebra::Vector2;
use thiserror::Error;

use crate::association::MatchSet;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WeightError {
    #[error("match ({i}, {j}) has no track for segment {j}")]
    MissingTrack { i: usize, j: usize },
    #[error("invalid weight config: {0}")]
    InvalidConfig(&'static str),
}

/// How the orientation variance turns into a geometric weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightForm {
    /// `λ / σ_θ²`
    #[default]
    VarianceForm,
    /// `λ / σ_θ`
    StddevForm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightConfig {
    pub sigma_base: f64,
    /// Length-scaling parameter, px².
    pub kappa: f64,
    pub lambda: f64,
    pub w_min: f64,
    pub tau_trk: u32,
    pub form: WeightForm,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            sigma_base: 1.0,
            kappa: 40000.0,
            lambda: 1.0,
            w_min: 0.1,
            tau_trk: 3,
            form: WeightForm::VarianceForm,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<(), WeightError> {
        if !(self.sigma_base > 0.0) {
            return Err(WeightError::InvalidConfig("sigma_base must be positive"));
        }
        if !(self.kappa >= 0.0) {
            return Err(WeightError::InvalidConfig("kappa must be non-negative"));
        }
        if !(self.w_min > 0.0 && self.w_min <= 1.0) {
            return Err(WeightError::InvalidConfig("w_min must lie in (0, 1]"));
        }
        if self.tau_trk < 1 {
            return Err(WeightError::InvalidConfig("tau_trk must be at least 1"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(WeightError::InvalidConfig("lambda must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineTrack {
    pub track_id: u64,
    /// Number of keyframes the segment has been tracked in, counting the current one.
    pub n_obs: u32,
    pub latest_start: Vector2<f64>,
    pub latest_end: Vector2<f64>,
}

impl LineTrack {
    pub fn length(&self) -> f64 {
        (self.latest_end - self.latest_start).norm()
    }
}

/// `σ_θ² = σ_base² + κ / max(L, 1)²`
pub fn orientation_variance(length: f64, cfg: &WeightConfig) -> f64 {
    let l = length.max(1.0);
    cfg.sigma_base * cfg.sigma_base + cfg.kappa / (l * l)
}

pub fn geometric_weight(sigma_theta_sq: f64, cfg: &WeightConfig) -> f64 {
    let w = match cfg.form {
        WeightForm::VarianceForm => cfg.lambda / sigma_theta_sq,
        WeightForm::StddevForm => cfg.lambda / sigma_theta_sq.sqrt(),
    };
    w.max(cfg.w_min)
}

pub fn visibility_weight(n_obs: u32, cfg: &WeightConfig) -> f64 {
    if n_obs >= cfg.tau_trk {
        1.0
    } else {
        cfg.w_min
    }
}

/// `ω = w_geo(L) · w_vis(n_obs)`
pub fn line_weight(length: f64, n_obs: u32, cfg: &WeightConfig) -> f64 {
    geometric_weight(orientation_variance(length, cfg), cfg) * visibility_weight(n_obs, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedMatch {
    pub i: usize,
    pub j: usize,
    pub confidence: f64,
    pub weight: f64,
}

/// One weight per accepted match. `tracks` is keyed by the segment index in
/// the second frame of the match set.
pub fn line_weights(
    matches: &MatchSet,
    tracks: &BTreeMap<usize, LineTrack>,
    cfg: &WeightConfig,
) -> Result<Vec<WeightedMatch>, WeightError> {
    matches
        .pairs
        .iter()
        .map(|p| {
            let track = tracks
                .get(&p.j)
                .ok_or(WeightError::MissingTrack { i: p.i, j: p.j })?;
            Ok(WeightedMatch {
                i: p.i,
                j: p.j,
                confidence: p.confidence,
                weight: line_weight(track.length(), track.n_obs, cfg),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::Match;
    use proptest::prelude::*;

    fn track(len: f64, n_obs: u32) -> LineTrack {
        LineTrack {
            track_id: 0,
            n_obs,
            latest_start: Vector2::new(0.0, 0.0),
            latest_end: Vector2::new(len, 0.0),
        }
    }

    fn stddev() -> WeightConfig {
        WeightConfig {
            form: WeightForm::StddevForm,
            ..WeightConfig::default()
        }
    }

    #[test]
    fn variance_values() {
        let cfg = WeightConfig::default();
        assert_eq!(orientation_variance(200.0, &cfg), 2.0);
        assert_eq!(orientation_variance(0.5, &cfg), 40001.0);
        assert!((orientation_variance(1e9, &cfg) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn geometric_values() {
        let cfg = WeightConfig::default();
        assert_eq!(geometric_weight(1.0, &cfg), 1.0);
        assert_eq!(geometric_weight(1.0, &stddev()), 1.0);
        assert_eq!(geometric_weight(2.0, &cfg), 0.5);
        assert!((geometric_weight(2.0, &stddev()) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(geometric_weight(1e6, &cfg), 0.1);
        assert_eq!(geometric_weight(1e6, &stddev()), 0.1);
    }

    #[test]
    fn visibility_values() {
        let cfg = WeightConfig::default();
        assert_eq!(visibility_weight(3, &cfg), 1.0);
        assert_eq!(visibility_weight(2, &cfg), 0.1);
        assert_eq!(visibility_weight(100, &cfg), 1.0);
    }

    #[test]
    fn composed_weights() {
        let cfg = WeightConfig::default();
        let ms = MatchSet {
            pairs: vec![
                Match { i: 0, j: 0, confidence: 0.9 },
                Match { i: 1, j: 1, confidence: 0.8 },
                Match { i: 2, j: 2, confidence: 0.7 },
            ],
            ..MatchSet::default()
        };
        let tracks = BTreeMap::from([(0, track(200.0, 5)), (1, track(200.0, 1)), (2, track(1e9, 3))]);
        let w = line_weights(&ms, &tracks, &cfg).unwrap();
        assert_eq!(w[0].weight, 0.5);
        assert!((w[1].weight - 0.05).abs() < 1e-15);
        assert!((w[2].weight - 1.0).abs() < 1e-12);
        assert_eq!(w[1].confidence, 0.8);
    }

    #[test]
    fn missing_track() {
        let ms = MatchSet {
            pairs: vec![Match { i: 4, j: 7, confidence: 0.9 }],
            ..MatchSet::default()
        };
        let r = line_weights(&ms, &BTreeMap::new(), &WeightConfig::default());
        assert_eq!(r, Err(WeightError::MissingTrack { i: 4, j: 7 }));
    }

    #[test]
    fn monotone_in_length() {
        for cfg in [WeightConfig::default(), stddev()] {
            let mut prev = 0.0;
            for l in 1..=1000 {
                let w = geometric_weight(orientation_variance(l as f64, &cfg), &cfg);
                assert!(w >= prev);
                prev = w;
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(WeightConfig::default().validate().is_ok());
        let bad = WeightConfig { w_min: 0.0, ..WeightConfig::default() };
        assert!(bad.validate().is_err());
        let bad = WeightConfig { tau_trk: 0, ..WeightConfig::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn weight_bounds(len in 0.0f64..5000.0, n_obs in 1u32..50) {
            let cfg = WeightConfig::default();
            let geo = geometric_weight(orientation_variance(len, &cfg), &cfg);
            prop_assert!(geo >= cfg.w_min && geo <= cfg.lambda / (cfg.sigma_base * cfg.sigma_base));
            let vis = visibility_weight(n_obs, &cfg);
            prop_assert!(vis == cfg.w_min || vis == 1.0);
            let w = line_weight(len, n_obs, &cfg);
            prop_assert_eq!(w, geo * vis);
            prop_assert!(w >= cfg.w_min * cfg.w_min);
            prop_assert_eq!(w, line_weight(len, n_obs, &cfg));
        }
    }
}
