//! Line matching between two frames by entropy-regularized optimal transport.
//!
//! Segment lengths are the transported masses. One virtual node is appended
//! on each side so unmatched segments can dump their mass at cost `τ`; the
//! balanced problem is solved with log-domain Sinkhorn, the plan is turned
//! into row-normalized confidences and discrete matches are read off by
//! mutual-best selection above a threshold `δ`.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::descriptor::LineDescriptor;
use crate::geometry::LineSegment2D;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssociationError {
    #[error("{what}: expected {expected} entries, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid OT config: {0}")]
    InvalidConfig(&'static str),
    #[error("marginals must be balanced and positive (Σâ = {sum_a}, Σb̂ = {sum_b})")]
    InvalidMarginals { sum_a: f64, sum_b: f64 },
}

/// Solver and selection hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtConfig {
    /// Cost of sending mass to a virtual node.
    pub tau: f64,
    /// Entropy regularization strength.
    pub epsilon: f64,
    /// Added to the row mass when normalizing confidences.
    pub eta: f64,
    /// Confidence threshold for accepting a match.
    pub delta: f64,
    pub max_iters: usize,
    /// Relative marginal tolerance (fraction of total mass).
    pub tol: f64,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            tau: 0.15,
            epsilon: 0.05,
            eta: 1e-8,
            delta: 0.6,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

impl OtConfig {
    pub fn validate(&self) -> Result<(), AssociationError> {
        if !(self.epsilon > 0.0) {
            return Err(AssociationError::InvalidConfig("epsilon must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(AssociationError::InvalidConfig("delta must lie in (0, 1)"));
        }
        if !(self.tau >= 0.0) {
            return Err(AssociationError::InvalidConfig("tau must be non-negative"));
        }
        if !(self.eta >= 0.0) {
            return Err(AssociationError::InvalidConfig("eta must be non-negative"));
        }
        if self.max_iters == 0 {
            return Err(AssociationError::InvalidConfig("max_iters must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(AssociationError::InvalidConfig("tol must be positive"));
        }
        Ok(())
    }
}

/// Output of [`sinkhorn`]. `plan` is `(M+1)×(N+1)` in the same mass units as
/// the marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: DMatrix<f64>,
    pub a_hat: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub iterations_used: usize,
    /// Largest absolute marginal violation at exit.
    pub marginal_error: f64,
    pub converged: bool,
}

impl TransportPlan {
    pub fn total_mass(&self) -> f64 {
        self.a_hat.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AssociationWarning {
    /// Sinkhorn hit `max_iters`; the returned plan is still used.
    NonConvergence { marginal_error: f64, iterations: usize },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
    pub warning: Option<AssociationWarning>,
}

impl MatchSet {
    /// Fills the unmatched lists from the accepted pairs.
    fn with_unmatched(pairs: Vec<Match>, m: usize, n: usize) -> Self {
        let mut used_a = vec![false; m];
        let mut used_b = vec![false; n];
        for p in &pairs {
            used_a[p.i] = true;
            used_b[p.j] = true;
        }
        Self {
            pairs,
            unmatched_a: (0..m).filter(|&i| !used_a[i]).collect(),
            unmatched_b: (0..n).filter(|&j| !used_b[j]).collect(),
            warning: None,
        }
    }

    pub fn partner_of_a(&self, i: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.i == i).map(|p| p.j)
    }
}

/// Segment lengths in pixels.
pub fn compute_masses(segments: &[LineSegment2D]) -> Vec<f64> {
    segments.iter().map(|s| (s.start - s.end).norm()).collect()
}

/// `C_ij = 1 − ⟨f_i, f_j⟩` for unit descriptors.
pub fn cost_matrix(descs_a: &[LineDescriptor], descs_b: &[LineDescriptor]) -> DMatrix<f64> {
    DMatrix::from_fn(descs_a.len(), descs_b.len(), |i, j| {
        1.0 - descs_a[i].similarity(&descs_b[j])
    })
}

/// Augmented cost and marginals: `â = [a; Σb]`, `b̂ = [b; Σa]`, cost `τ` on the
/// virtual row and column and 0 in the corner.
pub fn augment(cost: &DMatrix<f64>, a: &[f64], b: &[f64], tau: f64) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let (m, n) = cost.shape();
    debug_assert_eq!((m, n), (a.len(), b.len()));
    let sum_a: f64 = a.iter().sum();
    let sum_b: f64 = b.iter().sum();
    let mut c_hat = DMatrix::from_element(m + 1, n + 1, tau);
    c_hat.view_mut((0, 0), (m, n)).copy_from(cost);
    c_hat[(m, n)] = 0.0;
    let mut a_hat = a.to_vec();
    a_hat.push(sum_b);
    let mut b_hat = b.to_vec();
    b_hat.push(sum_a);
    (c_hat, a_hat, b_hat)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Over-relaxation factor for the potential updates. Same fixed point as
/// plain alternating scaling; far fewer sweeps when most mass sits on the
/// virtual nodes.
const OVERRELAXATION: f64 = 1.7;

/// Balanced entropic OT by alternating log-domain scaling of the dual
/// potentials `f`, `g`, with `P_ij = exp((f_i + g_j − C_ij)/ε)`.
///
/// Updates are over-relaxed after the first sweep. Stops once both marginals
/// are within `tol·Σâ` or after `max_iters` sweeps.
pub fn sinkhorn(
    cost: &DMatrix<f64>,
    a_hat: &[f64],
    b_hat: &[f64],
    cfg: &OtConfig,
) -> Result<TransportPlan, AssociationError> {
    cfg.validate()?;
    let (m, n) = cost.shape();
    if a_hat.len() != m {
        return Err(AssociationError::DimensionMismatch {
            what: "row marginal",
            expected: m,
            actual: a_hat.len(),
        });
    }
    if b_hat.len() != n {
        return Err(AssociationError::DimensionMismatch {
            what: "column marginal",
            expected: n,
            actual: b_hat.len(),
        });
    }
    let sum_a: f64 = a_hat.iter().sum();
    let sum_b: f64 = b_hat.iter().sum();
    if !(sum_a > 0.0) || (sum_a - sum_b).abs() > 1e-9 * sum_a.max(sum_b) {
        return Err(AssociationError::InvalidMarginals { sum_a, sum_b });
    }

    let eps = cfg.epsilon;
    // row-major −C/ε for cache-friendly row sweeps; column-major view for columns
    let neg_c_rows: Vec<f64> = (0..m)
        .flat_map(|i| (0..n).map(move |j| -cost[(i, j)] / eps))
        .collect();
    let neg_c_cols: Vec<f64> = cost.iter().map(|c| -c / eps).collect();
    let log_a: Vec<f64> = a_hat.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b_hat.iter().map(|v| v.ln()).collect();

    // potentials scaled by 1/ε
    let mut f = vec![0.0; m];
    let mut g = vec![0.0; n];
    let mut lse_rows = vec![0.0; m];
    // column log-sums against the current f, left over from the last g update
    let mut lse_cols: Vec<f64> = (0..n)
        .map(|j| log_sum_exp(neg_c_cols[j * m..(j + 1) * m].iter().zip(&f).map(|(c, fi)| c + fi)))
        .collect();
    let threshold = cfg.tol * sum_a;
    let mut iterations = 0;
    let mut marginal_error;
    let mut converged = false;
    let violation = |pot: &[f64], lse: &[f64], target: &[f64]| {
        (0..target.len())
            .map(|k| {
                let mass = if pot[k] == f64::NEG_INFINITY { 0.0 } else { (pot[k] + lse[k]).exp() };
                (mass - target[k]).abs()
            })
            .fold(0.0, f64::max)
    };
    let relax = |old: f64, target: f64| {
        if target == f64::NEG_INFINITY || old == f64::NEG_INFINITY {
            target
        } else {
            old + OVERRELAXATION * (target - old)
        }
    };

    loop {
        for i in 0..m {
            let row = &neg_c_rows[i * n..(i + 1) * n];
            lse_rows[i] = log_sum_exp(row.iter().zip(&g).map(|(c, gj)| c + gj));
        }
        marginal_error = violation(&f, &lse_rows, a_hat).max(violation(&g, &lse_cols, b_hat));
        if marginal_error <= threshold {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iters {
            break;
        }
        for i in 0..m {
            let target = if log_a[i] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                log_a[i] - lse_rows[i]
            };
            f[i] = if iterations == 0 { target } else { relax(f[i], target) };
        }
        for j in 0..n {
            let col = &neg_c_cols[j * m..(j + 1) * m];
            lse_cols[j] = log_sum_exp(col.iter().zip(&f).map(|(c, fi)| c + fi));
            let target = if log_b[j] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                log_b[j] - lse_cols[j]
            };
            g[j] = if iterations == 0 { target } else { relax(g[j], target) };
        }
        iterations += 1;
    }

    let plan = DMatrix::from_fn(m, n, |i, j| {
        let e = f[i] + g[j] - cost[(i, j)] / eps;
        if e == f64::NEG_INFINITY {
            0.0
        } else {
            e.exp()
        }
    });
    Ok(TransportPlan {
        plan,
        a_hat: a_hat.to_vec(),
        b_hat: b_hat.to_vec(),
        iterations_used: iterations,
        marginal_error,
        converged,
    })
}

/// `T_ij = P_ij / (a_i + η)` over the top-left `M×N` block.
pub fn confidence(plan: &TransportPlan, a: &[f64], eta: f64) -> DMatrix<f64> {
    let m = a.len();
    let n = plan.plan.ncols() - 1;
    DMatrix::from_fn(m, n, |i, j| plan.plan[(i, j)] / (a[i] + eta))
}

/// Accepts `(i, j)` when each is the other's argmax in `T` and `T_ij > δ`.
/// Ties resolve to the lowest index.
pub fn mutual_best(t: &DMatrix<f64>, delta: f64) -> MatchSet {
    let (m, n) = t.shape();
    let argmax = |it: &mut dyn Iterator<Item = (usize, f64)>| -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, v) in it {
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        best.map(|(k, _)| k)
    };
    let col_best: Vec<Option<usize>> = (0..n)
        .map(|j| argmax(&mut (0..m).map(|i| (i, t[(i, j)]))))
        .collect();
    let mut pairs = Vec::new();
    for i in 0..m {
        if let Some(j) = argmax(&mut (0..n).map(|j| (j, t[(i, j)]))) {
            if col_best[j] == Some(i) && t[(i, j)] > delta {
                pairs.push(Match {
                    i,
                    j,
                    confidence: t[(i, j)],
                });
            }
        }
    }
    MatchSet::with_unmatched(pairs, m, n)
}

/// End-to-end OT association. Segments shorter than 1 px are left unmatched.
pub fn associate_lines(
    segs_a: &[LineSegment2D],
    segs_b: &[LineSegment2D],
    descs_a: &[LineDescriptor],
    descs_b: &[LineDescriptor],
    cfg: &OtConfig,
) -> Result<MatchSet, AssociationError> {
    cfg.validate()?;
    check_parallel(segs_a, descs_a, "frame A descriptors")?;
    check_parallel(segs_b, descs_b, "frame B descriptors")?;

    let keep_a: Vec<usize> = (0..segs_a.len()).filter(|&i| segs_a[i].length >= 1.0).collect();
    let keep_b: Vec<usize> = (0..segs_b.len()).filter(|&j| segs_b[j].length >= 1.0).collect();
    if keep_a.is_empty() || keep_b.is_empty() {
        return Ok(MatchSet::with_unmatched(Vec::new(), segs_a.len(), segs_b.len()));
    }
    let sub_segs = |segs: &[LineSegment2D], keep: &[usize]| -> Vec<LineSegment2D> {
        keep.iter().map(|&k| segs[k]).collect()
    };
    let sub_descs = |descs: &[LineDescriptor], keep: &[usize]| -> Vec<LineDescriptor> {
        keep.iter().map(|&k| descs[k].clone()).collect()
    };
    let a = compute_masses(&sub_segs(segs_a, &keep_a));
    let b = compute_masses(&sub_segs(segs_b, &keep_b));
    let cost = cost_matrix(&sub_descs(descs_a, &keep_a), &sub_descs(descs_b, &keep_b));
    let (c_hat, a_hat, b_hat) = augment(&cost, &a, &b, cfg.tau);
    let plan = sinkhorn(&c_hat, &a_hat, &b_hat, cfg)?;
    let t = confidence(&plan, &a, cfg.eta);
    let local = mutual_best(&t, cfg.delta);

    let pairs = local
        .pairs
        .iter()
        .map(|p| Match {
            i: keep_a[p.i],
            j: keep_b[p.j],
            confidence: p.confidence,
        })
        .collect();
    let mut out = MatchSet::with_unmatched(pairs, segs_a.len(), segs_b.len());
    if !plan.converged {
        out.warning = Some(AssociationWarning::NonConvergence {
            marginal_error: plan.marginal_error,
            iterations: plan.iterations_used,
        });
    }
    Ok(out)
}

/// Baseline matcher: every line in A takes its most similar line in B
/// (lowest index on ties), with no threshold and no exclusivity.
pub fn nearest_neighbor_match(
    descs_a: &[LineDescriptor],
    descs_b: &[LineDescriptor],
) -> MatchSet {
    let mut pairs = Vec::new();
    for (i, da) in descs_a.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, db) in descs_b.iter().enumerate() {
            let s = da.similarity(db);
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((j, s));
            }
        }
        if let Some((j, s)) = best {
            pairs.push(Match { i, j, confidence: s });
        }
    }
    MatchSet::with_unmatched(pairs, descs_a.len(), descs_b.len())
}

fn check_parallel(
    segs: &[LineSegment2D],
    descs: &[LineDescriptor],
    what: &'static str,
) -> Result<(), AssociationError> {
    if segs.len() != descs.len() {
        return Err(AssociationError::DimensionMismatch {
            what,
            expected: segs.len(),
            actual: descs.len(),
        });
    }
    Ok(())
}
