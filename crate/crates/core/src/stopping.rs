//! Stopping and pruning rules over confidence intervals.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::estimator::{EstimateReport, REL_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoppingConfig {
    /// Per-coordinate relative tolerance. `0` disables estimation entirely:
    /// no intermediate checks, every pass runs to the end.
    pub eps: f64,
    /// Minimum number of converged snapshots before the IGD rule can fire.
    pub m: usize,
    /// Allowed relative spread of converged snapshot estimates.
    pub beta: f64,
    /// Slack for approximate dominance, as a fraction of the largest |estimate|.
    pub overlap_eps: f64,
    pub containment: bool,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        StoppingConfig {
            eps: 0.05,
            m: 2,
            beta: 0.01,
            overlap_eps: 0.05,
            containment: true,
        }
    }
}

impl StoppingConfig {
    pub fn disabled() -> Self {
        StoppingConfig {
            eps: 0.0,
            ..Self::default()
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.eps == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) || self.eps.is_infinite() {
            return Err(Error::Config(alloc::format!(
                "eps must be >= 0, got {}",
                self.eps
            )));
        }
        if self.m < 1 {
            return Err(Error::Config("m must be >= 1".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(alloc::format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.overlap_eps >= 0.0) || self.overlap_eps.is_infinite() {
            return Err(Error::Config(alloc::format!(
                "overlap_eps must be finite and >= 0, got {}",
                self.overlap_eps
            )));
        }
        Ok(())
    }
}

/// True when the summed relative interval widths are within `d * eps`.
///
/// Never fires on fewer than two samples: a single sample has no variance
/// estimate and would report a zero-width interval.
pub fn stop_gradient(g: &[EstimateReport], eps: f64) -> bool {
    if g.is_empty() {
        return false;
    }
    if g.iter().any(|c| c.n_seen < 2 && !c.is_exact()) {
        return false;
    }
    let total: f64 = g.iter().map(EstimateReport::relative_width).sum();
    total <= g.len() as f64 * eps
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneRules {
    pub approximate: bool,
    pub containment: bool,
}

impl PruneRules {
    pub const EXACT_ONLY: PruneRules = PruneRules {
        approximate: false,
        containment: false,
    };
    pub const ALL: PruneRules = PruneRules {
        approximate: true,
        containment: true,
    };
}

/// Candidate indices split by fate. The three lists partition the input.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PruneVerdict {
    pub surviving: Vec<usize>,
    pub discarded_exact: Vec<usize>,
    /// Approximate-dominance and containment discards.
    pub discarded_approx: Vec<usize>,
}

impl PruneVerdict {
    pub fn is_discarded(&self, j: usize) -> bool {
        self.discarded_exact.contains(&j) || self.discarded_approx.contains(&j)
    }
}

/// Interval pruning with every rule enabled.
pub fn stop_loss(losses: &[EstimateReport], overlap_eps: f64) -> Result<PruneVerdict> {
    prune(losses, overlap_eps, PruneRules::ALL)
}

/// Marks candidates whose loss interval shows they cannot (or very likely do
/// not) hold the minimum. Every comparison is against the input intervals, so
/// the result does not depend on evaluation order. When two intervals
/// dominate each other under the same rule the lower index survives. At least
/// one candidate always survives.
pub fn prune(
    losses: &[EstimateReport],
    overlap_eps: f64,
    rules: PruneRules,
) -> Result<PruneVerdict> {
    let n = losses.len();
    if n == 0 {
        return Err(Error::Structural("no candidates to prune".into()));
    }
    if losses
        .iter()
        .any(|r| !r.estimate.is_finite() || !r.half_width.is_finite())
    {
        return Err(Error::NonFinite {
            what: "loss interval",
        });
    }
    let low: Vec<f64> = losses.iter().map(EstimateReport::low).collect();
    let high: Vec<f64> = losses.iter().map(EstimateReport::high).collect();
    let scale = losses
        .iter()
        .map(|r| libm::fabs(r.estimate))
        .fold(0.0, libm::fmax);
    let slack = overlap_eps * scale;

    // kill(i, j): i's interval rules out j under one rule family. Mutual kills
    // resolve towards the lower index.
    let beats = |i: usize, j: usize, rel: &dyn Fn(usize, usize) -> bool| -> bool {
        i != j && rel(i, j) && (!rel(j, i) || i < j)
    };
    let exact_rel = |i: usize, j: usize| high[i] <= low[j];
    let approx_rel = |i: usize, j: usize| high[i] <= low[j] + slack;

    let mut exact = alloc::vec![false; n];
    let mut approx = alloc::vec![false; n];
    for j in 0..n {
        if (0..n).any(|i| beats(i, j, &exact_rel)) {
            exact[j] = true;
            continue;
        }
        if rules.approximate && (0..n).any(|i| beats(i, j, &approx_rel)) {
            approx[j] = true;
        }
    }
    if rules.containment {
        for i in 0..n {
            for j in 0..n {
                if i == j || !(low[i] < low[j] && high[j] < high[i]) {
                    continue;
                }
                // j strictly inside i
                if low[j] >= losses[i].estimate && !exact[j] {
                    approx[j] = true;
                }
                if high[j] <= losses[i].estimate && !exact[i] {
                    approx[i] = true;
                }
            }
        }
    }

    if (0..n).all(|j| exact[j] || approx[j]) {
        let keep = argmin_estimate(losses, 0..n);
        exact[keep] = false;
        approx[keep] = false;
    }
    let mut v = PruneVerdict::default();
    for j in 0..n {
        if exact[j] {
            v.discarded_exact.push(j);
        } else if approx[j] {
            v.discarded_approx.push(j);
        } else {
            v.surviving.push(j);
        }
    }
    Ok(v)
}

/// Lowest estimate among `idx`, ties to the lower index.
pub fn argmin_estimate(losses: &[EstimateReport], idx: impl IntoIterator<Item = usize>) -> usize {
    let mut best: Option<usize> = None;
    for i in idx {
        match best {
            Some(b) if losses[i].estimate >= losses[b].estimate => {}
            _ => best = Some(i),
        }
    }
    best.expect("argmin over an empty set")
}

/// Convergence test for incremental passes: enough snapshot estimates have
/// tight intervals and they agree with each other.
pub fn stop_igd_loss(snapshots: &[EstimateReport], eps: f64, m: usize, beta: f64) -> bool {
    let conv: Vec<f64> = snapshots
        .iter()
        .filter(|r| r.n_seen >= 2 && r.relative_width() <= eps)
        .map(|r| r.estimate)
        .collect();
    if conv.is_empty() || conv.len() < m {
        return false;
    }
    let max = conv.iter().copied().fold(f64::NEG_INFINITY, libm::fmax);
    let min = conv.iter().copied().fold(f64::INFINITY, libm::fmin);
    (max - min) / libm::fmax(libm::fabs(max), REL_FLOOR) <= beta
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    /// Index of the single remaining candidate.
    Stop(usize),
}

/// Joint loss and gradient test for one check of a speculative batch pass.
///
/// Candidates that are certainly worse (exact dominance) are always dropped.
/// The approximate and containment rules only kick in once the current
/// best candidate's gradient has converged; dropping near-ties earlier would
/// gamble on estimates that are still moving. The pass stops when a single
/// candidate remains and its gradient has converged.
pub fn stop_combined(
    gradients: &[&[EstimateReport]],
    losses: &[EstimateReport],
    cfg: &StoppingConfig,
) -> Result<(Decision, PruneVerdict)> {
    if gradients.len() != losses.len() {
        return Err(Error::Structural(alloc::format!(
            "{} gradient estimates for {} loss estimates",
            gradients.len(),
            losses.len()
        )));
    }
    let exact = prune(losses, cfg.overlap_eps, PruneRules::EXACT_ONLY)?;
    let best = argmin_estimate(losses, exact.surviving.iter().copied());
    let mut verdict = exact;
    if stop_gradient(gradients[best], cfg.eps) {
        let rules = PruneRules {
            approximate: true,
            containment: cfg.containment,
        };
        let full = prune(losses, cfg.overlap_eps, rules)?;
        let mut surviving = Vec::new();
        for &j in &verdict.surviving {
            if full.surviving.contains(&j) {
                surviving.push(j);
            } else {
                verdict.discarded_approx.push(j);
            }
        }
        if surviving.is_empty() {
            // the approximate rules may remove the current best; keep it
            verdict.discarded_approx.retain(|&j| j != best);
            surviving.push(best);
        }
        verdict.surviving = surviving;
        verdict.discarded_approx.sort_unstable();
    }
    let decision = match verdict.surviving.as_slice() {
        [only] if stop_gradient(gradients[*only], cfg.eps) => Decision::Stop(*only),
        _ => Decision::Continue,
    };
    Ok((decision, verdict))
}
