//! Incremental passes: plain, speculative, approximate and mini-batch.
//!
//! A speculative pass starts from `r` frozen originals and runs `r * s`
//! children, child `(i, l)` starting at original `i` and stepping with
//! candidate `l`. The same scan measures every original's loss; the
//! children of the best original become the next pass's originals.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use specgd_core::estimator::moments_report;
use specgd_core::kernel::loss_block;
use specgd_core::schedule::relative_change;
use specgd_core::stopping::{argmin_estimate, prune, stop_igd_loss, PruneRules};
use specgd_core::{Accumulator, Error as CoreError, EstimateReport, GroupStepper, Model, TaskSpec};

use super::{Approx, Engine};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// How workers share a model during an incremental pass.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum Discipline {
    /// Private copy per worker, averaged by example count at the end.
    Merge,
    /// One shared model; each update holds a mutex.
    Lock,
    /// One shared model of per-coordinate atomics; concurrent updates may
    /// interleave but no coordinate is ever torn.
    #[value(name = "nolock")]
    NoLock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IgdState {
    pub originals: Vec<Model>,
    /// `(step, batch)` that produced each original; empty for a fresh start.
    pub steps: Vec<(f64, u64)>,
}

impl IgdState {
    pub fn fresh(model: Model) -> Self {
        IgdState {
            originals: vec![model],
            steps: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IgdOutcome {
    /// Children of the chosen original.
    pub state: IgdState,
    pub chosen: usize,
    /// Objective of the chosen original.
    pub loss: EstimateReport,
    /// Last interval of every original; pruned ones keep the interval they
    /// were pruned with.
    pub original_losses: Vec<EstimateReport>,
    pub examples_seen: u64,
    pub stopped_early: bool,
}

struct Snapshot {
    child: usize,
    weights: Vec<f64>,
    reg: f64,
    acc: Accumulator,
    report: Option<EstimateReport>,
    done: bool,
}

struct Worker {
    steppers: Vec<GroupStepper>,
    private: Vec<Vec<f64>>,
    seen: u64,
}

enum Shared {
    Private,
    Lock(Vec<Mutex<Vec<f64>>>),
    NoLock(Vec<Vec<AtomicU64>>),
}

struct BlockLoss {
    originals: Vec<Accumulator>,
    snapshots: Vec<Accumulator>,
}

fn load(a: &[AtomicU64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(a) {
        *o = f64::from_bits(v.load(Ordering::Relaxed));
    }
}

fn atomic_step(a: &[AtomicU64], alpha: f64, g: &[f64]) {
    for (v, &gj) in a.iter().zip(g) {
        let _ = v.fetch_update(Ordering::Relaxed, Ordering::Relaxed, |old| {
            Some((f64::from_bits(old) - alpha * gj).to_bits())
        });
    }
}

/// Runs child `c` over one block on whichever store the discipline uses.
#[allow(clippy::too_many_arguments)]
fn child_block(
    task: &TaskSpec,
    ds: &Dataset,
    block: usize,
    c: usize,
    st: &mut GroupStepper,
    private: &mut [Vec<f64>],
    shared: &Shared,
    buf: &mut [f64],
) {
    let view = ds.block(block);
    match shared {
        Shared::Private => {
            let w = &mut private[c];
            for ex in view.iter() {
                st.process(task, w, ex);
            }
        }
        Shared::Lock(ms) => {
            for ex in view.iter() {
                let mut w = ms[c].lock().unwrap_or_else(|p| p.into_inner());
                st.process(task, &mut w, ex);
            }
        }
        Shared::NoLock(ms) => {
            let a = &ms[c];
            for ex in view.iter() {
                load(a, buf);
                if st.observe(task, buf, ex) {
                    let alpha = st.alpha();
                    let g = st.finish_group(task, buf);
                    atomic_step(a, alpha, g);
                    st.clear();
                }
            }
        }
    }
    st.end_block();
}

fn flush_child(
    task: &TaskSpec,
    c: usize,
    st: &mut GroupStepper,
    private: &mut [Vec<f64>],
    shared: &Shared,
    buf: &mut [f64],
) {
    if !st.has_pending() {
        return;
    }
    match shared {
        Shared::Private => st.apply(task, &mut private[c]),
        Shared::Lock(ms) => st.apply(task, &mut ms[c].lock().unwrap_or_else(|p| p.into_inner())),
        Shared::NoLock(ms) => {
            load(&ms[c], buf);
            let alpha = st.alpha();
            let g = st.finish_group(task, buf);
            atomic_step(&ms[c], alpha, g);
            st.clear();
        }
    }
}

/// Example-weighted average of the workers' private copies of child `c`.
fn average_child(workers: &[Worker], c: usize) -> Vec<f64> {
    if workers.len() == 1 {
        return workers[0].private[c].clone();
    }
    let total: u64 = workers.iter().map(|w| w.seen).sum();
    let d = workers[0].private[c].len();
    let mut out = vec![0.0; d];
    for w in workers {
        let share = if total == 0 {
            1.0 / workers.len() as f64
        } else {
            w.seen as f64 / total as f64
        };
        for (o, v) in out.iter_mut().zip(&w.private[c]) {
            *o += share * v;
        }
    }
    out
}

struct Run {
    children: Vec<Vec<f64>>,
    chosen: usize,
    original_losses: Vec<Option<EstimateReport>>,
    seen: u64,
    stopped: bool,
}

impl Engine<'_> {
    /// One plain incremental pass with a fixed step.
    pub fn igd_epoch(
        &self,
        model: &Model,
        alpha: f64,
        discipline: Discipline,
        start: usize,
    ) -> Result<Model> {
        let run = self.igd_run(
            &[&model.weights],
            &[(alpha, 1)],
            discipline,
            start,
            false,
            None,
        )?;
        Ok(Model {
            weights: run.children.into_iter().next().expect("one child"),
            iter: model.iter + 1,
        })
    }

    /// Runs every original with every step and keeps the children of the
    /// original with the lowest exact loss.
    pub fn speculative_igd_epoch(
        &self,
        state: &IgdState,
        steps: &[f64],
        discipline: Discipline,
        start: usize,
    ) -> Result<IgdOutcome> {
        let specs: Vec<(f64, u64)> = steps.iter().map(|&a| (a, 1)).collect();
        self.igd_outcome(state, &specs, discipline, start, None)
    }

    /// Speculative pass that prunes originals on loss intervals and, once a
    /// single original is left, stops when snapshots of its children agree.
    pub fn approximate_igd_epoch(
        &self,
        state: &IgdState,
        steps: &[f64],
        discipline: Discipline,
        approx: &Approx,
        start: usize,
    ) -> Result<IgdOutcome> {
        approx.stopping.validate()?;
        let specs: Vec<(f64, u64)> = steps.iter().map(|&a| (a, 1)).collect();
        self.igd_outcome(state, &specs, discipline, start, Some(approx))
    }

    /// Speculative pass where child `(i, l)` steps once per `pairs[l].1`
    /// consecutive examples using the group's summed gradient.
    pub fn minibatch_epoch(
        &self,
        state: &IgdState,
        pairs: &[(f64, u64)],
        discipline: Discipline,
        start: usize,
    ) -> Result<IgdOutcome> {
        self.igd_outcome(state, pairs, discipline, start, None)
    }

    /// Mini-batch pass with the pruning and snapshot rules of
    /// [`Engine::approximate_igd_epoch`].
    pub fn approximate_minibatch_epoch(
        &self,
        state: &IgdState,
        pairs: &[(f64, u64)],
        discipline: Discipline,
        approx: &Approx,
        start: usize,
    ) -> Result<IgdOutcome> {
        approx.stopping.validate()?;
        self.igd_outcome(state, pairs, discipline, start, Some(approx))
    }

    fn igd_outcome(
        &self,
        state: &IgdState,
        specs: &[(f64, u64)],
        discipline: Discipline,
        start: usize,
        approx: Option<&Approx>,
    ) -> Result<IgdOutcome> {
        let originals: Vec<&[f64]> = state
            .originals
            .iter()
            .map(|m| m.weights.as_slice())
            .collect();
        let run = self.igd_run(&originals, specs, discipline, start, true, approx)?;
        let s = specs.len();
        let iter = state.originals[run.chosen].iter + 1;
        let new_originals = run.children[run.chosen * s..(run.chosen + 1) * s]
            .iter()
            .map(|w| Model {
                weights: w.clone(),
                iter,
            })
            .collect();
        let original_losses: Vec<EstimateReport> = run
            .original_losses
            .iter()
            .map(|r| r.expect("every original was measured"))
            .collect();
        Ok(IgdOutcome {
            state: IgdState {
                originals: new_originals,
                steps: specs.to_vec(),
            },
            chosen: run.chosen,
            loss: original_losses[run.chosen],
            original_losses,
            examples_seen: run.seen,
            stopped_early: run.stopped,
        })
    }

    fn igd_run(
        &self,
        originals: &[&[f64]],
        specs: &[(f64, u64)],
        discipline: Discipline,
        start: usize,
        track_loss: bool,
        approx: Option<&Approx>,
    ) -> Result<Run> {
        self.check_start(start)?;
        if originals.is_empty() || specs.is_empty() {
            return Err(Error::Config("need at least one model and one step".into()));
        }
        for w in originals {
            self.check_model(w)?;
        }
        let task = self.task;
        let n = self.n();
        let d = self.ds.dim();
        let s = specs.len();
        let n_children = originals.len() * s;
        let m = self.parts.m;
        let checking = approx.filter(|a| !a.stopping.is_disabled());

        let steppers: Vec<GroupStepper> = (0..n_children)
            .map(|c| GroupStepper::new(d, specs[c % s].0, specs[c % s].1, n))
            .collect::<std::result::Result<_, CoreError>>()?;
        let initial: Vec<Vec<f64>> = (0..n_children).map(|c| originals[c / s].to_vec()).collect();
        let (mut workers, shared): (Vec<Worker>, Shared) = match discipline {
            Discipline::Merge => (
                (0..m)
                    .map(|_| Worker {
                        steppers: steppers.clone(),
                        private: initial.clone(),
                        seen: 0,
                    })
                    .collect(),
                Shared::Private,
            ),
            Discipline::Lock => (
                (0..m)
                    .map(|_| Worker {
                        steppers: steppers.clone(),
                        private: Vec::new(),
                        seen: 0,
                    })
                    .collect(),
                Shared::Lock(initial.into_iter().map(Mutex::new).collect()),
            ),
            Discipline::NoLock => (
                (0..m)
                    .map(|_| Worker {
                        steppers: steppers.clone(),
                        private: Vec::new(),
                        seen: 0,
                    })
                    .collect(),
                Shared::NoLock(
                    initial
                        .iter()
                        .map(|w| w.iter().map(|v| AtomicU64::new(v.to_bits())).collect())
                        .collect(),
                ),
            ),
        };

        let reg_orig: Vec<f64> = originals
            .iter()
            .map(|w| task.regularizer_value(w))
            .collect();
        let mut orig_active = vec![true; originals.len()];
        let mut orig_totals = vec![Accumulator::EMPTY; originals.len()];
        let mut orig_last: Vec<Option<EstimateReport>> = vec![None; originals.len()];
        let mut snapshots: Vec<Snapshot> = Vec::new();

        let order: Vec<usize> = self.ds.scan_order(start).collect();
        let mut schedule = match checking {
            Some(a) => Some(specgd_core::CheckSchedule::new(n, a.first_check)?),
            None => None,
        };
        let mut pos = 0;
        let mut seen = 0u64;
        let mut prev_best: Option<f64> = None;
        let mut stopped = false;

        while pos < order.len() {
            let target = schedule.as_ref().map_or(n, |s| s.next_target());
            let mut end = pos;
            let mut upto = seen;
            while end < order.len() && upto < target {
                upto += self.ds.block(order[end]).len() as u64;
                end += 1;
            }
            let round = &order[pos..end];
            let active_children: Vec<usize> =
                (0..n_children).filter(|&c| orig_active[c / s]).collect();
            let measured: Vec<usize> = if track_loss {
                (0..originals.len()).filter(|&i| orig_active[i]).collect()
            } else {
                Vec::new()
            };
            let live: Vec<usize> = (0..snapshots.len())
                .filter(|&k| !snapshots[k].done)
                .collect();

            let results = self.igd_round(
                round,
                &mut workers,
                &shared,
                &active_children,
                originals,
                &measured,
                &snapshots,
                &live,
            );
            for (k, bl) in results.iter().enumerate() {
                debug_assert!(k < round.len());
                for (&i, a) in measured.iter().zip(&bl.originals) {
                    orig_totals[i].merge_from(a);
                }
                for (&q, a) in live.iter().zip(&bl.snapshots) {
                    snapshots[q].acc.merge_from(a);
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
            let cfg = &a.stopping;
            // prune originals on their loss intervals
            let act: Vec<usize> = (0..originals.len()).filter(|&i| orig_active[i]).collect();
            let reports: Vec<EstimateReport> = act
                .iter()
                .map(|&i| Ok(report(&orig_totals[i], n, self.z)?.shifted(reg_orig[i])))
                .collect::<std::result::Result<_, CoreError>>()?;
            for (k, &i) in act.iter().enumerate() {
                orig_last[i] = Some(reports[k]);
            }
            // near-tie rules wait until the leading estimate has converged
            let lead = reports[argmin_estimate(&reports, 0..reports.len())];
            let rules = if lead.n_seen >= 2 && lead.relative_width() <= cfg.eps {
                PruneRules {
                    approximate: true,
                    containment: cfg.containment,
                }
            } else {
                PruneRules::EXACT_ONLY
            };
            let verdict = prune(&reports, cfg.overlap_eps, rules)?;
            for k in verdict
                .discarded_exact
                .iter()
                .chain(&verdict.discarded_approx)
            {
                orig_active[act[*k]] = false;
            }
            snapshots.retain(|sn| orig_active[sn.child / s]);
            for sn in snapshots.iter_mut().filter(|sn| !sn.done && sn.acc.n > 0) {
                let r = report(&sn.acc, n, self.z)?.shifted(sn.reg);
                sn.done = sn.acc.n >= 2 && r.relative_width() <= cfg.eps;
                sn.report = Some(r);
            }
            let survivors: Vec<usize> = (0..originals.len()).filter(|&i| orig_active[i]).collect();
            if let [t] = survivors.as_slice() {
                let converged = (t * s..(t + 1) * s).any(|c| {
                    let rs: Vec<EstimateReport> = snapshots
                        .iter()
                        .filter(|sn| sn.child == c)
                        .filter_map(|sn| sn.report)
                        .collect();
                    stop_igd_loss(&rs, cfg.eps, cfg.m, cfg.beta)
                });
                if converged {
                    stopped = true;
                    break;
                }
            }
            let best = survivors
                .iter()
                .map(|&i| orig_last[i].map_or(f64::INFINITY, |r| r.estimate))
                .fold(f64::INFINITY, f64::min);
            let stagnant = prev_best.is_some_and(|p| relative_change(p, best) < 0.1 * cfg.eps);
            prev_best = Some(best);
            sched.advance(seen, stagnant);

            // synchronize private copies, then snapshot every live child
            let kids: Vec<usize> = (0..n_children).filter(|&c| orig_active[c / s]).collect();
            for &c in &kids {
                let w = match &shared {
                    Shared::Private => {
                        let avg = average_child(&workers, c);
                        if workers.len() > 1 {
                            for wk in workers.iter_mut() {
                                wk.private[c].copy_from_slice(&avg);
                            }
                        }
                        avg
                    }
                    Shared::Lock(ms) => ms[c].lock().unwrap_or_else(|p| p.into_inner()).clone(),
                    Shared::NoLock(ms) => {
                        let mut w = vec![0.0; d];
                        load(&ms[c], &mut w);
                        w
                    }
                };
                let reg = task.regularizer_value(&w);
                snapshots.push(Snapshot {
                    child: c,
                    weights: w,
                    reg,
                    acc: Accumulator::EMPTY,
                    report: None,
                    done: false,
                });
            }
        }

        // close partial groups and collect the children
        let mut buf = vec![0.0; d];
        for wk in workers.iter_mut() {
            for c in (0..n_children).filter(|&c| orig_active[c / s]) {
                flush_child(
                    &task,
                    c,
                    &mut wk.steppers[c],
                    &mut wk.private,
                    &shared,
                    &mut buf,
                );
            }
        }
        let children: Vec<Vec<f64>> = match &shared {
            Shared::Private => (0..n_children)
                .map(|c| average_child(&workers, c))
                .collect(),
            Shared::Lock(ms) => ms
                .iter()
                .map(|w| w.lock().unwrap_or_else(|p| p.into_inner()).clone())
                .collect(),
            Shared::NoLock(ms) => ms
                .iter()
                .map(|a| {
                    let mut w = vec![0.0; d];
                    load(a, &mut w);
                    w
                })
                .collect(),
        };
        if children.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric("incremental steps diverged".into()).into());
        }

        let mut chosen = 0;
        if track_loss {
            let act: Vec<usize> = (0..originals.len()).filter(|&i| orig_active[i]).collect();
            let mut reports = Vec::with_capacity(act.len());
            for &i in &act {
                let r = if stopped {
                    report(&orig_totals[i], n, self.z)?.shifted(reg_orig[i])
                } else {
                    let l = orig_totals[i].sum + reg_orig[i];
                    if !l.is_finite() {
                        return Err(CoreError::Numeric("objective overflowed".into()).into());
                    }
                    EstimateReport::exact(l, n)
                };
                orig_last[i] = Some(r);
                reports.push(r);
            }
            chosen = act[argmin_estimate(&reports, 0..reports.len())];
        }
        Ok(Run {
            children,
            chosen,
            original_losses: orig_last,
            seen,
            stopped,
        })
    }

    /// Workers process their blocks of `round`; returns per-block losses in
    /// round order.
    #[allow(clippy::too_many_arguments)]
    fn igd_round(
        &self,
        round: &[usize],
        workers: &mut [Worker],
        shared: &Shared,
        children: &[usize],
        originals: &[&[f64]],
        measured: &[usize],
        snapshots: &[Snapshot],
        live: &[usize],
    ) -> Vec<BlockLoss> {
        let task = self.task;
        let ds = self.ds;
        let parts = self.parts;
        let d = ds.dim();
        let work = |p: usize, wk: &mut Worker| -> Vec<(usize, BlockLoss)> {
            let mut buf = vec![0.0; d];
            let mut out = Vec::new();
            for (k, &b) in round
                .iter()
                .enumerate()
                .filter(|(_, &b)| parts.owner(b) == p)
            {
                let view = ds.block(b);
                let bl = BlockLoss {
                    originals: measured
                        .iter()
                        .map(|&i| loss_block(&task, originals[i], view))
                        .collect(),
                    snapshots: live
                        .iter()
                        .map(|&q| loss_block(&task, &snapshots[q].weights, view))
                        .collect(),
                };
                for &c in children {
                    child_block(
                        &task,
                        ds,
                        b,
                        c,
                        &mut wk.steppers[c],
                        &mut wk.private,
                        shared,
                        &mut buf,
                    );
                }
                wk.seen += view.len() as u64;
                out.push((k, bl));
            }
            out
        };
        let mut pieces: Vec<(usize, BlockLoss)> = if workers.len() == 1 {
            work(0, &mut workers[0])
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = workers
                    .iter_mut()
                    .enumerate()
                    .map(|(p, wk)| scope.spawn(move || work(p, wk)))
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
                    .collect()
            })
        };
        pieces.sort_by_key(|(k, _)| *k);
        pieces.into_iter().map(|(_, bl)| bl).collect()
    }
}

fn report(
    a: &Accumulator,
    population: u64,
    z: f64,
) -> std::result::Result<EstimateReport, CoreError> {
    moments_report(a.n, a.sum, a.sum_sq, population, z)
}
