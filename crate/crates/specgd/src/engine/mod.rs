//! Parallel drivers over an in-memory dataset.
//!
//! Work is split by blocks: block `b` belongs to worker `b % m`. Per-block
//! results come back to the coordinator and are folded in scan order, so the
//! worker count never changes a batch result.

mod bgd;
mod igd;
mod train;

use specgd_core::kernel::{evaluate_model_block, loss_block, CandidateStats};
use specgd_core::{z_score, Accumulator, Error as CoreError, Model, TaskSpec};

pub use bgd::{BgdOutcome, BgdState};
pub use igd::{Discipline, IgdOutcome, IgdState};
pub use train::{train, IterationMetrics, Method, Mode, StepPolicy, TrainConfig, TrainOutcome};

use crate::data::{Dataset, Partitioning};
use crate::error::{Error, Result};

/// Approximate-mode settings: stopping thresholds and the first check point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Approx {
    pub stopping: specgd_core::StoppingConfig,
    /// Fraction of the pass seen before the first check.
    pub first_check: f64,
}

impl Approx {
    pub fn new(stopping: specgd_core::StoppingConfig) -> Self {
        Approx {
            stopping,
            first_check: specgd_core::CheckSchedule::DEFAULT_FIRST_FRACTION,
        }
    }
}

/// Parameters of the Armijo backtracking baseline.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LineSearchConfig {
    pub c1: f64,
    pub rho: f64,
    pub alpha0: f64,
}

impl LineSearchConfig {
    pub const MAX_BACKTRACKS: u32 = 50;

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c1 < 1.0)
            || !(self.rho > 0.0 && self.rho < 1.0)
            || !(self.alpha0 > 0.0)
        {
            return Err(Error::Config(format!(
                "line search needs c1, rho in (0, 1) and alpha0 > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchOutcome {
    pub model: Model,
    pub loss: f64,
    pub alpha: f64,
    /// Full passes over the data, the gradient pass included.
    pub passes: u32,
}

/// Dataset, task and worker layout shared by every pass.
#[derive(Debug, Clone)]
pub struct Engine<'a> {
    ds: &'a Dataset,
    task: TaskSpec,
    parts: Partitioning,
    z: f64,
}

impl<'a> Engine<'a> {
    pub fn new(ds: &'a Dataset, task: TaskSpec, workers: usize) -> Result<Self> {
        Ok(Engine {
            ds,
            task,
            parts: Partitioning::new(ds.n_blocks(), workers)?,
            z: z_score(0.95),
        })
    }

    pub fn with_confidence(mut self, confidence: f64) -> Result<Self> {
        if !(confidence > 0.0 && confidence < 1.0) {
            return Err(Error::Config(format!(
                "confidence must be in (0, 1), got {confidence}"
            )));
        }
        self.z = z_score(confidence);
        Ok(self)
    }

    pub fn dataset(&self) -> &Dataset {
        self.ds
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn workers(&self) -> usize {
        self.parts.m
    }

    fn n(&self) -> u64 {
        self.ds.n()
    }

    fn check_start(&self, start: usize) -> Result<()> {
        if start >= self.ds.n_blocks() {
            return Err(Error::Config(format!("start block {start} out of range")));
        }
        Ok(())
    }

    fn check_model(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.ds.dim() {
            return Err(CoreError::DimensionMismatch {
                expected: self.ds.dim(),
                got: w.len(),
            }
            .into());
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { what: "model" }.into());
        }
        Ok(())
    }

    /// Evaluates `f` on each block, on the owning worker, and returns the
    /// results in the order of `blocks`.
    pub(crate) fn map_blocks<S, T, I, F>(&self, blocks: &[usize], init: I, f: F) -> Vec<T>
    where
        T: Send,
        I: Fn() -> S + Sync,
        F: Fn(&mut S, usize) -> T + Sync,
    {
        let m = self.parts.m;
        if m == 1 || blocks.len() <= 1 {
            let mut s = init();
            return blocks.iter().map(|&b| f(&mut s, b)).collect();
        }
        let parts = self.parts;
        let mut slots: Vec<Option<T>> = blocks.iter().map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..m)
                .map(|p| {
                    let (f, init) = (&f, &init);
                    scope.spawn(move || {
                        let mut s = init();
                        blocks
                            .iter()
                            .enumerate()
                            .filter(|(_, &b)| parts.owner(b) == p)
                            .map(|(k, &b)| (k, f(&mut s, b)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                match h.join() {
                    Ok(rs) => rs.into_iter().for_each(|(k, t)| slots[k] = Some(t)),
                    Err(e) => std::panic::resume_unwind(e),
                }
            }
        });
        slots
            .into_iter()
            .map(|t| t.expect("every block evaluated"))
            .collect()
    }

    /// Exact objective and its gradient at `w`, in one pass.
    pub fn full_gradient(&self, w: &[f64], start: usize) -> Result<(Vec<f64>, f64)> {
        self.check_model(w)?;
        self.check_start(start)?;
        let order: Vec<usize> = self.ds.scan_order(start).collect();
        let task = self.task;
        let per_block = self.map_blocks(
            &order,
            || (),
            |_, b| evaluate_model_block(&task, w, self.ds.block(b), false),
        );
        let mut total = CandidateStats::empty(w.len(), false);
        for st in &per_block {
            total.merge_from(st);
        }
        let grad = specgd_core::kernel::add_regularizer_gradient(&task, w, &total.grad);
        let loss = total.loss.sum + task.regularizer_value(w);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(CoreError::Numeric("objective or gradient overflowed".into()).into());
        }
        Ok((grad, loss))
    }

    /// Exact objective at `w`.
    pub fn loss(&self, w: &[f64], start: usize) -> Result<f64> {
        self.check_model(w)?;
        self.check_start(start)?;
        let order: Vec<usize> = self.ds.scan_order(start).collect();
        let task = self.task;
        let per_block =
            self.map_blocks(&order, || (), |_, b| loss_block(&task, w, self.ds.block(b)));
        let mut total = Accumulator::EMPTY;
        for a in &per_block {
            total.merge_from(a);
        }
        let loss = total.sum + task.regularizer_value(w);
        if !loss.is_finite() {
            return Err(CoreError::Numeric("objective overflowed".into()).into());
        }
        Ok(loss)
    }

    /// One plain gradient step: returns `w - alpha * grad(w)` and the
    /// objective at the input model.
    pub fn bgd_iterate(&self, model: &Model, alpha: f64, start: usize) -> Result<(Model, f64)> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Config(format!(
                "step size must be finite and >= 0, got {alpha}"
            )));
        }
        let (g, loss) = self.full_gradient(&model.weights, start)?;
        let weights = model
            .weights
            .iter()
            .zip(&g)
            .map(|(w, g)| w - alpha * g)
            .collect();
        Ok((
            Model {
                weights,
                iter: model.iter + 1,
            },
            loss,
        ))
    }

    /// Gradient step with Armijo backtracking; each trial costs a loss pass.
    pub fn line_search_baseline(
        &self,
        model: &Model,
        cfg: &LineSearchConfig,
        start: usize,
    ) -> Result<LineSearchOutcome> {
        cfg.validate()?;
        let (g, loss) = self.full_gradient(&model.weights, start)?;
        let gg: f64 = g.iter().map(|v| v * v).sum();
        let mut alpha = cfg.alpha0;
        for trial in 1..=LineSearchConfig::MAX_BACKTRACKS {
            let w: Vec<f64> = model
                .weights
                .iter()
                .zip(&g)
                .map(|(w, g)| w - alpha * g)
                .collect();
            let passes = trial + 1;
            if let Ok(l) = self.loss(&w, start) {
                if l <= loss - cfg.c1 * alpha * gg {
                    return Ok(LineSearchOutcome {
                        model: Model {
                            weights: w,
                            iter: model.iter + 1,
                        },
                        loss: l,
                        alpha,
                        passes,
                    });
                }
            }
            alpha *= cfg.rho;
        }
        Err(CoreError::StepFailure(LineSearchConfig::MAX_BACKTRACKS).into())
    }
}
