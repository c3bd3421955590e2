//! The outer training loop: step selection, the speculation width, and
//! per-iteration metrics.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specgd_core::estimator::REL_FLOOR;
use specgd_core::{
    bayes_update, bayes_update_2d, sample_steps, EstimateReport, Model, SpeculationController,
    StepBatchDistribution, StepDistribution, StoppingConfig,
};

use super::{Approx, BgdState, Discipline, Engine, IgdOutcome, IgdState, LineSearchConfig};
use crate::error::{Error, Result};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bgd,
    Igd,
    #[value(name = "minibatch")]
    MiniBatch,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One step per pass.
    Plain,
    /// `s` candidate steps per pass, evaluated on the full data.
    #[value(name = "spec")]
    #[serde(rename = "spec")]
    Speculative,
    /// Speculative with interval checks and early stopping.
    #[value(name = "approx")]
    #[serde(rename = "approx")]
    Approximate,
    /// Armijo backtracking; batch method only.
    LineSearch,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepPolicy {
    /// Draw candidates from a log-normal and update it after every pass.
    Sampled(StepDistribution),
    /// The same candidates every pass; plain mode uses the first.
    Fixed(Vec<f64>),
    /// A single step `alpha0 / (1 + rate * t)` at pass `t`.
    Decay { alpha0: f64, rate: f64 },
}

impl StepPolicy {
    fn single(&self, t: u64) -> f64 {
        match self {
            StepPolicy::Sampled(d) => d.median(),
            StepPolicy::Fixed(v) => v[0],
            StepPolicy::Decay { alpha0, rate } => alpha0 / (1.0 + rate * t as f64),
        }
    }

    fn candidates(&self, s: usize, t: u64, seed: u64) -> Result<Vec<f64>> {
        Ok(match self {
            StepPolicy::Sampled(d) => sample_steps(d, s, seed)?,
            StepPolicy::Fixed(v) => v.clone(),
            StepPolicy::Decay { .. } => vec![self.single(t)],
        })
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            StepPolicy::Sampled(_) => true,
            StepPolicy::Fixed(v) => !v.is_empty() && v.iter().all(|a| a.is_finite() && *a >= 0.0),
            StepPolicy::Decay { alpha0, rate } => {
                alpha0.is_finite() && *alpha0 > 0.0 && rate.is_finite() && *rate >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid step policy {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub mode: Mode,
    pub discipline: Discipline,
    /// Candidates per pass when not adaptive.
    pub s: usize,
    pub adaptive_s: bool,
    pub s_max: usize,
    pub max_iters: u64,
    /// Stop once the relative change of the reported loss drops below this.
    pub loss_delta_tol: Option<f64>,
    pub stopping: StoppingConfig,
    pub first_check: f64,
    pub steps: StepPolicy,
    pub batch_prior: StepBatchDistribution,
    pub line_search: LineSearchConfig,
    pub seed: u64,
    pub initial: Option<Model>,
}

impl TrainConfig {
    pub fn new(method: Method, mode: Mode, steps: StepPolicy) -> Self {
        TrainConfig {
            method,
            mode,
            discipline: Discipline::Merge,
            s: 1,
            adaptive_s: false,
            s_max: 32,
            max_iters: 10,
            loss_delta_tol: None,
            stopping: StoppingConfig::default(),
            first_check: specgd_core::CheckSchedule::DEFAULT_FIRST_FRACTION,
            steps,
            batch_prior: StepBatchDistribution::standard(),
            line_search: LineSearchConfig {
                c1: 1e-4,
                rho: 0.5,
                alpha0: 1.0,
            },
            seed: 0,
            initial: None,
        }
    }

    fn validate(&self) -> Result<()> {
        self.steps.validate()?;
        self.stopping.validate()?;
        if self.s == 0 || self.s_max == 0 {
            return Err(Error::Config("s and s_max must be >= 1".into()));
        }
        if self.mode == Mode::LineSearch && self.method != Method::Bgd {
            return Err(Error::Config(
                "line search only applies to the batch method".into(),
            ));
        }
        if let Some(t) = self.loss_delta_tol {
            if !(t >= 0.0) {
                return Err(Error::Config(format!(
                    "loss tolerance must be >= 0, got {t}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub iter: u64,
    pub wall_ms: f64,
    pub examples_seen: u64,
    pub frac_scanned: f64,
    pub s_used: usize,
    /// Step of the selected model; NaN when it was not produced by a step.
    pub selected_alpha: f64,
    pub loss_est: f64,
    pub loss_halfwidth: f64,
    pub loss_exact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<IterationMetrics>,
}

/// Per-iteration summary every method produces.
struct Step {
    seen: u64,
    s_used: usize,
    alpha: f64,
    loss: EstimateReport,
}

/// Runs up to `cfg.max_iters` passes. The gradient pass a batch method
/// needs before its first step is not counted as an iteration.
pub fn train(engine: &Engine<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = engine.n();
    let d = engine.dataset().dim();
    let n_blocks = engine.dataset().n_blocks();
    let initial = cfg.initial.clone().unwrap_or_else(|| Model::zeros(d));
    if initial.dim() != d {
        return Err(specgd_core::Error::DimensionMismatch {
            expected: d,
            got: initial.dim(),
        }
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let approx = Approx {
        stopping: cfg.stopping,
        first_check: cfg.first_check,
    };
    let mut ctrl = SpeculationController::new(cfg.s_max, 0.10, 0.25)?;
    let mut dist = match &cfg.steps {
        StepPolicy::Sampled(d) => Some(*d),
        _ => None,
    };
    let mut prior2 = cfg.batch_prior;
    let mut metrics = Vec::new();

    let mut bgd: Option<BgdState> = None;
    let mut model = initial.clone();
    let mut igd = IgdState::fresh(initial);
    if cfg.method == Method::Bgd && cfg.mode != Mode::LineSearch && cfg.max_iters > 0 {
        let start = rng.random_range(0..n_blocks);
        bgd = Some(engine.bgd_start(model.clone(), start)?.0);
    }
    let mut prev_loss: Option<f64> = None;

    for t in 0..cfg.max_iters {
        let start = rng.random_range(0..n_blocks);
        let seed: u64 = rng.random();
        let s = match cfg.mode {
            Mode::Plain | Mode::LineSearch => 1,
            _ if cfg.adaptive_s => ctrl.s(),
            _ => cfg.s,
        };
        let clock = Instant::now();
        let step = match (cfg.method, cfg.mode) {
            (Method::Bgd, Mode::LineSearch) => {
                let out = engine.line_search_baseline(&model, &cfg.line_search, start)?;
                model = out.model;
                Step {
                    seen: out.passes as u64 * n,
                    s_used: 1,
                    alpha: out.alpha,
                    loss: EstimateReport::exact(out.loss, n),
                }
            }
            (Method::Bgd, mode) => {
                let state = bgd.as_ref().expect("batch state");
                let steps = match mode {
                    Mode::Plain => vec![cfg.steps.single(t)],
                    _ => cfg.steps.candidates(s, t, seed)?,
                };
                let out = match mode {
                    Mode::Approximate => {
                        engine.approximate_bgd_epoch(state, &steps, &approx, start)?
                    }
                    _ => engine.speculative_bgd_epoch(state, &steps, start)?,
                };
                if let (Some(dd), StepPolicy::Sampled(_), true) =
                    (dist.as_mut(), &cfg.steps, mode != Mode::Plain)
                {
                    let obs: Vec<(f64, f64)> = steps
                        .iter()
                        .zip(&out.losses)
                        .map(|(&a, r)| (a, r.estimate))
                        .collect();
                    *dd = bayes_update(dd, &obs)?;
                }
                let step = Step {
                    seen: out.examples_seen,
                    s_used: steps.len(),
                    alpha: out.alpha,
                    loss: out.loss,
                };
                bgd = Some(out.state);
                step
            }
            (Method::Igd, Mode::Plain) => {
                let alpha = cfg.steps.single(t);
                let before = model.clone();
                model = engine.igd_epoch(&before, alpha, cfg.discipline, start)?;
                // a plain pass measures no loss; pay for a scan only when the
                // tolerance needs one
                let loss = match cfg.loss_delta_tol {
                    Some(_) => EstimateReport::exact(engine.loss(&model.weights, start)?, n),
                    None => EstimateReport {
                        estimate: f64::NAN,
                        half_width: f64::NAN,
                        n_seen: 0,
                        population: n,
                    },
                };
                Step {
                    seen: n,
                    s_used: 1,
                    alpha,
                    loss,
                }
            }
            (Method::MiniBatch, Mode::Plain) => {
                let pair = (
                    cfg.steps.single(t),
                    (prior2.mean[1].round().clamp(1.0, n as f64)) as u64,
                );
                let out = engine.minibatch_epoch(&igd, &[pair], cfg.discipline, start)?;
                step_from_igd(&mut igd, out, 1)
            }
            (Method::Igd, mode) => {
                let steps = cfg.steps.candidates(s, t, seed)?;
                let out = match mode {
                    Mode::Approximate => engine.approximate_igd_epoch(
                        &igd,
                        &steps,
                        cfg.discipline,
                        &approx,
                        start,
                    )?,
                    _ => engine.speculative_igd_epoch(&igd, &steps, cfg.discipline, start)?,
                };
                // the originals were produced by last pass's steps; their
                // losses are only known now
                if let Some(dd) = dist.as_mut() {
                    let obs: Vec<(f64, f64)> = igd
                        .steps
                        .iter()
                        .zip(&out.original_losses)
                        .map(|(&(a, _), r)| (a, r.estimate))
                        .collect();
                    if !obs.is_empty() {
                        *dd = bayes_update(dd, &obs)?;
                    }
                }
                step_from_igd(&mut igd, out, steps.len())
            }
            (Method::MiniBatch, _) => {
                let pairs = prior2.sample(s, seed, n)?;
                let out = match cfg.mode {
                    Mode::Approximate => engine.approximate_minibatch_epoch(
                        &igd,
                        &pairs,
                        cfg.discipline,
                        &approx,
                        start,
                    )?,
                    _ => engine.minibatch_epoch(&igd, &pairs, cfg.discipline, start)?,
                };
                let obs: Vec<(f64, f64, f64)> = igd
                    .steps
                    .iter()
                    .zip(&out.original_losses)
                    .map(|(&(a, b), r)| (a, b as f64, r.estimate))
                    .collect();
                if !obs.is_empty() {
                    prior2 = bayes_update_2d(&prior2, &obs)?;
                }
                step_from_igd(&mut igd, out, pairs.len())
            }
        };
        let secs = clock.elapsed().as_secs_f64();
        if cfg.adaptive_s && matches!(cfg.mode, Mode::Speculative | Mode::Approximate) {
            ctrl.adapt_s(secs);
        }
        metrics.push(IterationMetrics {
            iter: t + 1,
            wall_ms: secs * 1e3,
            examples_seen: step.seen,
            frac_scanned: step.seen as f64 / n as f64,
            s_used: step.s_used,
            selected_alpha: step.alpha,
            loss_est: step.loss.estimate,
            loss_halfwidth: step.loss.half_width,
            loss_exact: step.loss.is_exact(),
        });
        if let (Some(tol), true) = (cfg.loss_delta_tol, step.loss.estimate.is_finite()) {
            let cur = step.loss.estimate;
            if let Some(p) = prev_loss {
                if (cur - p).abs() / p.abs().max(REL_FLOOR) < tol {
                    break;
                }
            }
            prev_loss = Some(cur);
        }
    }

    let model = match cfg.method {
        Method::Bgd => match bgd {
            Some(st) => st.model,
            None => model,
        },
        Method::Igd if cfg.mode == Mode::Plain => model,
        _ => best_original(engine, &igd)?,
    };
    Ok(TrainOutcome { model, metrics })
}

fn step_from_igd(igd: &mut IgdState, out: IgdOutcome, s_used: usize) -> Step {
    let alpha = igd.steps.get(out.chosen).map_or(f64::NAN, |p| p.0);
    let step = Step {
        seen: out.examples_seen,
        s_used,
        alpha,
        loss: out.loss,
    };
    *igd = out.state;
    step
}

/// Lowest exact objective among the current originals, ties to the lower index.
fn best_original(engine: &Engine<'_>, igd: &IgdState) -> Result<Model> {
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in igd.originals.iter().enumerate() {
        let l = engine.loss(&m.weights, 0)?;
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((i, l));
        }
    }
    Ok(igd.originals[best.expect("at least one original").0].clone())
}
