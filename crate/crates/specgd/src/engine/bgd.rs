//! Speculative and approximate batch passes.
//!
//! One pass evaluates `s` candidates `w - alpha_i * g` at once: their losses
//! and their gradients. The winner's gradient drives the next pass, so each
//! pass costs one scan regardless of `s`.

use specgd_core::kernel::{evaluate_line_block, LineScratch, StepLine};
use specgd_core::schedule::relative_change;
use specgd_core::stopping::{stop_combined, Decision};
use specgd_core::{CandidateStats, Error as CoreError, EstimateReport, Model};

use super::{Approx, Engine};
use crate::error::{Error, Result};

/// A model together with the (exact or estimated) objective gradient at it.
#[derive(Debug, Clone, PartialEq)]
pub struct BgdState {
    pub model: Model,
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BgdOutcome {
    /// The selected candidate and its gradient.
    pub state: BgdState,
    pub selected: usize,
    pub alpha: f64,
    pub loss: EstimateReport,
    /// Final loss interval of every candidate; pruned ones keep the interval
    /// they were pruned with.
    pub losses: Vec<EstimateReport>,
    pub examples_seen: u64,
    pub stopped_early: bool,
}

impl Engine<'_> {
    /// Exact state at `model`: one gradient pass.
    pub fn bgd_start(&self, model: Model, start: usize) -> Result<(BgdState, f64)> {
        let (gradient, loss) = self.full_gradient(&model.weights, start)?;
        Ok((BgdState { model, gradient }, loss))
    }

    /// Full scan over all candidates; picks the lowest exact objective, ties
    /// to the smaller step.
    pub fn speculative_bgd_epoch(
        &self,
        state: &BgdState,
        steps: &[f64],
        start: usize,
    ) -> Result<BgdOutcome> {
        self.bgd_pass(state, steps, start, None)
    }

    /// Like the speculative pass, but checks loss and gradient intervals at
    /// geometric points of the scan, prunes candidates, and stops once a
    /// single candidate is left with a converged gradient estimate.
    pub fn approximate_bgd_epoch(
        &self,
        state: &BgdState,
        steps: &[f64],
        approx: &Approx,
        start: usize,
    ) -> Result<BgdOutcome> {
        approx.stopping.validate()?;
        self.bgd_pass(state, steps, start, Some(approx))
    }

    fn bgd_pass(
        &self,
        state: &BgdState,
        steps: &[f64],
        start: usize,
        approx: Option<&Approx>,
    ) -> Result<BgdOutcome> {
        self.check_model(&state.model.weights)?;
        self.check_model(&state.gradient)?;
        self.check_start(start)?;
        if steps.is_empty() {
            return Err(Error::Config("need at least one step size".into()));
        }
        if steps.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::Config("step sizes must be finite and >= 0".into()));
        }
        let checking = approx.filter(|a| !a.stopping.is_disabled());
        let task = self.task;
        let n = self.n();
        let d = self.ds.dim();
        let line = StepLine {
            base: &state.model.weights,
            dir: &state.gradient,
        };
        let points: Vec<Vec<f64>> = steps.iter().map(|&a| line.point(a)).collect();
        let reg_values: Vec<f64> = points.iter().map(|w| task.regularizer_value(w)).collect();
        let reg_grads: Vec<Vec<f64>> = points
            .iter()
            .map(|w| task.regularizer_gradient(w))
            .collect();

        let order: Vec<usize> = self.ds.scan_order(start).collect();
        let mut schedule = match checking {
            Some(a) => Some(specgd_core::CheckSchedule::new(n, a.first_check)?),
            None => None,
        };
        let track = checking.is_some();
        let mut totals: Vec<CandidateStats> = steps
            .iter()
            .map(|_| CandidateStats::empty(d, track))
            .collect();
        let mut last: Vec<Option<EstimateReport>> = vec![None; steps.len()];
        let mut active: Vec<usize> = (0..steps.len()).collect();
        let mut pos = 0;
        let mut seen = 0u64;
        let mut prev_best: Option<f64> = None;

        while pos < order.len() {
            let mut end = pos;
            let mut upto = seen;
            let target = schedule.as_ref().map_or(n, |s| s.next_target());
            while end < order.len() && upto < target {
                upto += self.ds.block(order[end]).len() as u64;
                end += 1;
            }
            let alphas: Vec<f64> = active.iter().map(|&c| steps[c]).collect();
            let per_block = self.map_blocks(&order[pos..end], LineScratch::default, |sc, b| {
                evaluate_line_block(&task, line, &alphas, self.ds.block(b), track, sc)
            });
            for block_stats in &per_block {
                for (k, &c) in active.iter().enumerate() {
                    totals[c].merge_from(&block_stats[k]);
                }
            }
            pos = end;
            seen = upto;
            let (Some(a), Some(sched)) = (checking, schedule.as_mut()) else {
                continue;
            };
            if pos == order.len() {
                break;
            }

            let losses: Vec<EstimateReport> = active
                .iter()
                .map(|&c| Ok(totals[c].loss_report(n, self.z)?.shifted(reg_values[c])))
                .collect::<std::result::Result<_, CoreError>>()?;
            let grads: Vec<Vec<EstimateReport>> = active
                .iter()
                .map(|&c| {
                    let g = totals[c].grad_report(n, self.z)?;
                    Ok(g.into_iter()
                        .zip(&reg_grads[c])
                        .map(|(r, &o)| r.shifted(o))
                        .collect())
                })
                .collect::<std::result::Result<_, CoreError>>()?;
            let grad_refs: Vec<&[EstimateReport]> = grads.iter().map(Vec::as_slice).collect();
            let (decision, verdict) = stop_combined(&grad_refs, &losses, &a.stopping)?;
            for (k, &c) in active.iter().enumerate() {
                last[c] = Some(losses[k]);
            }
            if let Decision::Stop(k) = decision {
                let c = active[k];
                let gradient = grads[k].iter().map(|r| r.estimate).collect();
                return Ok(finish(
                    state, steps, &points, c, gradient, losses[k], &last, seen, true,
                ));
            }
            let best = losses
                .iter()
                .map(|r| r.estimate)
                .fold(f64::INFINITY, f64::min);
            let stagnant =
                prev_best.is_some_and(|p| relative_change(p, best) < 0.1 * a.stopping.eps);
            prev_best = Some(best);
            sched.advance(seen, stagnant);
            active = verdict.surviving.iter().map(|&k| active[k]).collect();
        }

        // Full scan: exact objectives for the remaining candidates.
        let mut exact: Vec<(usize, f64)> = Vec::with_capacity(active.len());
        for &c in &active {
            let l = totals[c].loss.sum + reg_values[c];
            last[c] = Some(EstimateReport::exact(l, n));
            if l.is_finite() {
                exact.push((c, l));
            }
        }
        let Some(&(c, l)) = exact
            .iter()
            .min_by(|x, y| x.1.total_cmp(&y.1).then(steps[x.0].total_cmp(&steps[y.0])))
        else {
            return Err(CoreError::Numeric("every candidate's objective overflowed".into()).into());
        };
        let gradient =
            specgd_core::kernel::add_regularizer_gradient(&task, &points[c], &totals[c].grad);
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(CoreError::Numeric("gradient overflowed".into()).into());
        }
        Ok(finish(
            state,
            steps,
            &points,
            c,
            gradient,
            EstimateReport::exact(l, n),
            &last,
            seen,
            false,
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    state: &BgdState,
    steps: &[f64],
    points: &[Vec<f64>],
    c: usize,
    gradient: Vec<f64>,
    loss: EstimateReport,
    last: &[Option<EstimateReport>],
    seen: u64,
    stopped_early: bool,
) -> BgdOutcome {
    BgdOutcome {
        state: BgdState {
            model: Model {
                weights: points[c].clone(),
                iter: state.model.iter + 1,
            },
            gradient,
        },
        selected: c,
        alpha: steps[c],
        loss,
        losses: last
            .iter()
            .map(|r| r.expect("every candidate was estimated"))
            .collect(),
        examples_seen: seen,
        stopped_early,
    }
}
