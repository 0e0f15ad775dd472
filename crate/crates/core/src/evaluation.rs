//! Trajectory and association metrics.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::association::MatchSet;
use crate::geometry::Pose;

/// Nearest-timestamp association window, seconds.
pub const ASSOCIATION_WINDOW_S: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvaluationError {
    #[error("only {pairs} timestamp-associated pose pairs, need at least 3")]
    InsufficientOverlap { pairs: usize },
    #[error("timestamps must be strictly increasing (index {index})")]
    NonMonotonicTimestamps { index: usize },
}

/// Timestamped camera-to-world poses; the translation is the camera position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    stamps: Vec<f64>,
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(stamps: Vec<f64>, poses: Vec<Pose>) -> Result<Self, EvaluationError> {
        assert_eq!(stamps.len(), poses.len(), "stamp and pose counts differ");
        for k in 1..stamps.len() {
            if !(stamps[k] > stamps[k - 1]) {
                return Err(EvaluationError::NonMonotonicTimestamps { index: k });
            }
        }
        Ok(Self { stamps, poses })
    }

    pub fn push(&mut self, stamp: f64, pose: Pose) -> Result<(), EvaluationError> {
        if let Some(last) = self.stamps.last() {
            if !(stamp > *last) {
                return Err(EvaluationError::NonMonotonicTimestamps { index: self.stamps.len() });
            }
        }
        self.stamps.push(stamp);
        self.poses.push(pose);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn stamps(&self) -> &[f64] {
        &self.stamps
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &Pose)> {
        self.stamps.iter().copied().zip(self.poses.iter())
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| *p.translation()).collect()
    }

    /// Applies `g` on the left of every pose (`g ∘ T_wc`).
    pub fn transformed(&self, g: &Pose) -> Trajectory {
        Self {
            stamps: self.stamps.clone(),
            poses: self.poses.iter().map(|p| g.compose(p)).collect(),
        }
    }

    fn nearest(&self, t: f64) -> Option<usize> {
        let k = self.stamps.partition_point(|s| *s < t);
        let mut best: Option<usize> = None;
        for c in [k.wrapping_sub(1), k] {
            if c < self.stamps.len()
                && best.is_none_or(|b| (self.stamps[c] - t).abs() < (self.stamps[b] - t).abs())
            {
                best = Some(c);
            }
        }
        best
    }
}

/// Position pairs `(est, ref)` whose timestamps are within the window.
pub fn associate(est: &Trajectory, reference: &Trajectory) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    est.iter()
        .filter_map(|(t, p)| {
            let k = reference.nearest(t)?;
            ((reference.stamps[k] - t).abs() <= ASSOCIATION_WINDOW_S)
                .then(|| (*p.translation(), *reference.poses[k].translation()))
        })
        .collect()
}

/// Least-squares rigid transform `T` minimizing `Σ‖T·p_est − p_ref‖²`.
pub fn align_rigid(est: &Trajectory, reference: &Trajectory) -> Result<Pose, EvaluationError> {
    let pairs = associate(est, reference);
    align_points(&pairs)
}

fn align_points(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Result<Pose, EvaluationError> {
    if pairs.len() < 3 {
        return Err(EvaluationError::InsufficientOverlap { pairs: pairs.len() });
    }
    let n = pairs.len() as f64;
    let mu_e = pairs.iter().map(|(e, _)| e).sum::<Vector3<f64>>() / n;
    let mu_r = pairs.iter().map(|(_, r)| r).sum::<Vector3<f64>>() / n;
    let cov = pairs
        .iter()
        .map(|(e, r)| (r - mu_r) * (e - mu_e).transpose())
        .sum::<Matrix3<f64>>()
        / n;
    let svd = cov.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = Rotation3::from_matrix_unchecked(u * s * v_t);
    let t = mu_r - r * mu_e;
    Ok(Pose::from_rotation(r, t))
}

fn rmse_after(pairs: &[(Vector3<f64>, Vector3<f64>)], t: &Pose) -> f64 {
    let sum: f64 = pairs
        .iter()
        .map(|(e, r)| (t.transform_point(e) - r).norm_squared())
        .sum();
    (sum / pairs.len() as f64).sqrt()
}

/// Translational RMSE after rigid alignment, in centimeters.
pub fn ate_rmse(est: &Trajectory, reference: &Trajectory) -> Result<f64, EvaluationError> {
    let pairs = associate(est, reference);
    let t = align_points(&pairs)?;
    Ok(100.0 * rmse_after(&pairs, &t))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MatchCounts {
    pub accepted: usize,
    pub correct: usize,
    pub possible: usize,
}

impl MatchCounts {
    /// Precision with the vacuous convention: no accepted pairs → 1.
    pub fn precision(&self) -> f64 {
        if self.accepted == 0 {
            1.0
        } else {
            self.correct as f64 / self.accepted as f64
        }
    }

    /// Recall with the convention: nothing co-visible → 1.
    pub fn recall(&self) -> f64 {
        if self.possible == 0 {
            1.0
        } else {
            self.correct as f64 / self.possible as f64
        }
    }

    pub fn add(&mut self, other: &MatchCounts) {
        self.accepted += other.accepted;
        self.correct += other.correct;
        self.possible += other.possible;
    }
}

/// Confusion counts for a match set given the ground-truth id of every
/// segment in each frame. Pairs are correct when their ids agree; `possible`
/// counts ids present in both frames.
pub fn match_counts(matches: &MatchSet, ids_a: &[u64], ids_b: &[u64]) -> MatchCounts {
    let correct = matches
        .pairs
        .iter()
        .filter(|p| ids_a[p.i] == ids_b[p.j])
        .count();
    let set_b: std::collections::BTreeSet<u64> = ids_b.iter().copied().collect();
    let set_a: std::collections::BTreeSet<u64> = ids_a.iter().copied().collect();
    MatchCounts {
        accepted: matches.pairs.len(),
        correct,
        possible: set_a.intersection(&set_b).count(),
    }
}

/// `(precision, recall)`; an empty match set has precision 1 by convention.
pub fn match_precision_recall(matches: &MatchSet, ids_a: &[u64], ids_b: &[u64]) -> (f64, f64) {
    let c = match_counts(matches, ids_a, ids_b);
    (c.precision(), c.recall())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Percentile bootstrap interval for the mean at confidence `1 − alpha`.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, alpha: f64, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(|a, b| a.total_cmp(b));
    let lo = ((alpha / 2.0) * resamples as f64).floor() as usize;
    let hi = (((1.0 - alpha / 2.0) * resamples as f64).ceil() as usize).min(resamples) - 1;
    (means[lo], means[hi])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::Match;
    use proptest::prelude::*;
    use rand_distr::Normal;

    fn spiral(n: usize) -> Trajectory {
        let stamps = (0..n).map(|k| k as f64 * 0.05).collect();
        let poses = (0..n)
            .map(|k| {
                let t = k as f64 * 0.1;
                Pose::from_axis_angle(Vector3::new(0.0, 0.0, t), Vector3::new(t.cos() * 2.0, t.sin() * 2.0, 0.1 * t))
            })
            .collect();
        Trajectory::new(stamps, poses).unwrap()
    }

    #[test]
    fn self_alignment_is_identity() {
        let tr = spiral(30);
        let t = align_rigid(&tr, &tr).unwrap();
        assert!(t.local(&Pose::identity()).norm() < 1e-9);
        assert!(ate_rmse(&tr, &tr).unwrap() < 1e-9);
    }

    #[test]
    fn recovers_known_offset() {
        let reference = spiral(30);
        let g = Pose::from_axis_angle(Vector3::new(0.4, -0.3, 1.2), Vector3::new(3.0, -1.0, 0.5));
        let est = reference.transformed(&g);
        let t = align_rigid(&est, &reference).unwrap();
        assert!(t.local(&g.inverse()).norm() < 1e-9);
        assert!(ate_rmse(&est, &reference).unwrap() < 1e-7);
    }

    #[test]
    fn constant_perpendicular_offset() {
        // ±1 cm out of plane in a checkerboard pattern: it has zero mean and no
        // linear trend across the plane, so no rigid motion can reduce it
        let corners = [(1.0, 1.0, 1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0), (1.0, -1.0, -1.0)];
        let mut reference = Trajectory::default();
        let mut est = Trajectory::default();
        for rep in 0..3 {
            for (k, (x, y, s)) in corners.iter().enumerate() {
                let t = (4 * rep + k) as f64;
                let scale = 1.0 + rep as f64;
                let p = Vector3::new(x * scale, y * scale, 0.0);
                reference.push(t, Pose::from_axis_angle(Vector3::zeros(), p)).unwrap();
                est.push(t, Pose::from_axis_angle(Vector3::zeros(), p + Vector3::new(0.0, 0.0, 0.01 * s))).unwrap();
            }
        }
        let ate = ate_rmse(&est, &reference).unwrap();
        assert!((ate - 1.0).abs() < 1e-9, "{ate}");
    }

    #[test]
    fn insufficient_overlap() {
        let a = spiral(10);
        let shifted = Trajectory::new(a.stamps().iter().map(|t| t + 100.0).collect(), a.poses().to_vec()).unwrap();
        assert_eq!(align_rigid(&a, &shifted), Err(EvaluationError::InsufficientOverlap { pairs: 0 }));
        let two = Trajectory::new(a.stamps()[..2].to_vec(), a.poses()[..2].to_vec()).unwrap();
        assert!(matches!(ate_rmse(&two, &a), Err(EvaluationError::InsufficientOverlap { pairs: 2 })));
    }

    #[test]
    fn association_window() {
        let a = spiral(10);
        let jittered = Trajectory::new(a.stamps().iter().map(|t| t + 0.015).collect(), a.poses().to_vec()).unwrap();
        assert_eq!(associate(&jittered, &a).len(), 10);
        let late = Trajectory::new(a.stamps().iter().map(|t| t + 0.025).collect(), a.poses().to_vec()).unwrap();
        assert_eq!(associate(&late, &a).len(), 0);
    }

    #[test]
    fn rejects_non_monotonic() {
        let p = Pose::identity();
        assert_eq!(
            Trajectory::new(vec![0.0, 1.0, 1.0], vec![p, p, p]),
            Err(EvaluationError::NonMonotonicTimestamps { index: 2 })
        );
    }

    /// Coarse Euler-angle grid followed by shrinking local refinement; the
    /// translation is closed form for each rotation.
    fn grid_search_rmse(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> f64 {
        let n = pairs.len() as f64;
        let mu_e = pairs.iter().map(|(e, _)| e).sum::<Vector3<f64>>() / n;
        let mu_r = pairs.iter().map(|(_, r)| r).sum::<Vector3<f64>>() / n;
        let cost = |a: &[f64; 3]| {
            let r = Rotation3::from_euler_angles(a[0], a[1], a[2]);
            let t = mu_r - r * mu_e;
            rmse_after(pairs, &Pose::from_rotation(r, t))
        };
        let pi = std::f64::consts::PI;
        let mut best = ([0.0; 3], f64::INFINITY);
        let steps = 24;
        for i in 0..steps {
            for j in 0..=steps / 2 {
                for k in 0..steps {
                    let a = [
                        -pi + 2.0 * pi * i as f64 / steps as f64,
                        -pi / 2.0 + pi * j as f64 / (steps / 2) as f64,
                        -pi + 2.0 * pi * k as f64 / steps as f64,
                    ];
                    let c = cost(&a);
                    if c < best.1 {
                        best = (a, c);
                    }
                }
            }
        }
        let mut step = 2.0 * pi / steps as f64;
        while step > 1e-9 {
            let mut improved = false;
            for axis in 0..3 {
                for sign in [-1.0, 1.0] {
                    let mut a = best.0;
                    a[axis] += sign * step;
                    let c = cost(&a);
                    if c < best.1 {
                        best = (a, c);
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        best.1
    }

    #[test]
    fn alignment_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.05).unwrap();
        for _ in 0..5 {
            let reference = spiral(25);
            let g = Pose::from_axis_angle(
                Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
                Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
            );
            let poses = reference
                .transformed(&g)
                .poses()
                .iter()
                .map(|p| {
                    let jitter = Vector3::new(rng.sample(noise), rng.sample(noise), rng.sample(noise));
                    Pose::from_rotation(*p.rotation3(), p.translation() + jitter)
                })
                .collect();
            let est = Trajectory::new(reference.stamps().to_vec(), poses).unwrap();
            let pairs = associate(&est, &reference);
            let closed = rmse_after(&pairs, &align_rigid(&est, &reference).unwrap());
            let searched = grid_search_rmse(&pairs);
            assert!(closed <= searched + 1e-12);
            assert!((closed - searched).abs() <= 1e-3, "{closed} vs {searched}");
        }
    }

    #[test]
    fn precision_recall_examples() {
        let ids: Vec<u64> = (0..10).collect();
        let all_right = MatchSet {
            pairs: (0..6).map(|i| Match { i, j: i, confidence: 0.9 }).collect(),
            ..MatchSet::default()
        };
        let (p, r) = match_precision_recall(&all_right, &ids, &ids);
        assert_eq!(p, 1.0);
        assert!(r <= 1.0);

        let (p, r) = match_precision_recall(&MatchSet::default(), &ids, &ids);
        assert_eq!((p, r), (1.0, 0.0));

        // 8 co-visible ids; 8 accepted, 2 of them wrong
        let ids_a: Vec<u64> = (0..10).collect();
        let ids_b: Vec<u64> = vec![0, 1, 2, 3, 4, 5, 6, 7, 100, 101];
        let mut pairs: Vec<Match> = (0..6).map(|i| Match { i, j: i, confidence: 0.9 }).collect();
        pairs.push(Match { i: 6, j: 7, confidence: 0.9 });
        pairs.push(Match { i: 7, j: 6, confidence: 0.9 });
        let ms = MatchSet { pairs, ..MatchSet::default() };
        assert_eq!(match_precision_recall(&ms, &ids_a, &ids_b), (0.75, 0.75));
    }

    #[test]
    fn median_and_bootstrap() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let v: Vec<f64> = (0..100).map(|k| k as f64).collect();
        let (lo, hi) = bootstrap_mean_ci(&v, 2000, 0.05, 1);
        assert!(lo < 49.5 && hi > 49.5);
        assert!(hi - lo < 15.0);
        assert_eq!(bootstrap_mean_ci(&v, 2000, 0.05, 1), (lo, hi));
    }

    proptest! {
        #[test]
        fn ate_is_rigid_invariant(ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0,
                                  tx in -10.0f64..10.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reference = spiral(20);
            let est = Trajectory::new(
                reference.stamps().to_vec(),
                reference.poses().iter().map(|p| {
                    let j = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
                    Pose::from_rotation(*p.rotation3(), p.translation() + j)
                }).collect(),
            ).unwrap();
            let g = Pose::from_axis_angle(Vector3::new(ax, ay, az), Vector3::new(tx, -tx, 0.5 * tx));
            let base = ate_rmse(&est, &reference).unwrap();
            prop_assert!((ate_rmse(&est.transformed(&g), &reference).unwrap() - base).abs() <= 1e-9);
            prop_assert!((ate_rmse(&est, &reference.transformed(&g)).unwrap() - base).abs() <= 1e-9);
        }
    }
}
