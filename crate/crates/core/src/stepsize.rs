//! Step-size distributions, their loss-weighted updates, and the controller
//! that decides how many candidates to evaluate per pass.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Log-normal distribution over step sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDistribution {
    pub mu_log: f64,
    pub sigma_log: f64,
    /// Pseudo-count of the prior in each update; `INFINITY` freezes it.
    pub kappa: f64,
    pub sigma_floor: f64,
}

impl StepDistribution {
    pub const DEFAULT_SIGMA_FLOOR: f64 = 0.05;

    pub fn new(mu_log: f64, sigma_log: f64, kappa: f64, sigma_floor: f64) -> Result<Self> {
        if !mu_log.is_finite() || !(sigma_log > 0.0) || !sigma_log.is_finite() {
            return Err(Error::Config(alloc::format!(
                "step distribution needs finite mu_log and sigma_log > 0, got ({mu_log}, {sigma_log})"
            )));
        }
        if !(kappa > 0.0) {
            return Err(Error::Config(alloc::format!(
                "kappa must be > 0, got {kappa}"
            )));
        }
        if !(sigma_floor >= 0.0) || !sigma_floor.is_finite() {
            return Err(Error::Config(alloc::format!(
                "sigma_floor must be >= 0, got {sigma_floor}"
            )));
        }
        Ok(StepDistribution {
            mu_log,
            sigma_log,
            kappa,
            sigma_floor,
        })
    }

    /// Centered on `alpha`, with `sigma_log` natural-log units of spread.
    pub fn centered(alpha: f64, sigma_log: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Config(alloc::format!(
                "step size must be > 0, got {alpha}"
            )));
        }
        Self::new(libm::log(alpha), sigma_log, 1.0, Self::DEFAULT_SIGMA_FLOOR)
    }

    pub fn median(&self) -> f64 {
        libm::exp(self.mu_log)
    }
}

/// Draws `s` step sizes, returned in ascending order.
pub fn sample_steps(dist: &StepDistribution, s: usize, seed: u64) -> Result<Vec<f64>> {
    if s == 0 {
        return Err(Error::Config("need at least one step size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<f64> = (0..s)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            libm::exp(dist.mu_log + dist.sigma_log * z)
        })
        .collect();
    if out.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
        return Err(Error::Numeric("sampled step size overflowed".into()));
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Relative weights `(L_max - L_i) / sum`, uniform when all losses tie.
fn loss_weights(losses: impl Iterator<Item = f64> + Clone) -> Result<Vec<f64>> {
    let mut lmax = f64::NEG_INFINITY;
    for l in losses.clone() {
        if !l.is_finite() {
            return Err(Error::NonFinite {
                what: "observed loss",
            });
        }
        lmax = libm::fmax(lmax, l);
    }
    let raw: Vec<f64> = losses.map(|l| lmax - l).collect();
    let total: f64 = raw.iter().sum();
    if raw.is_empty() {
        return Err(Error::Structural("no observations".into()));
    }
    if total > 0.0 {
        Ok(raw.iter().map(|w| w / total).collect())
    } else {
        let u = 1.0 / raw.len() as f64;
        Ok(raw.iter().map(|_| u).collect())
    }
}

/// Moves the distribution towards step sizes that produced low loss.
///
/// `obs` holds `(step, loss)` pairs from one pass.
pub fn bayes_update(dist: &StepDistribution, obs: &[(f64, f64)]) -> Result<StepDistribution> {
    if obs.is_empty() {
        return Err(Error::Structural("no observations".into()));
    }
    if obs.iter().any(|(a, _)| !(*a > 0.0) || !a.is_finite()) {
        return Err(Error::Config(
            "observed step sizes must be finite and > 0".into(),
        ));
    }
    let w = loss_weights(obs.iter().map(|o| o.1))?;
    if dist.kappa.is_infinite() {
        return Ok(*dist);
    }
    let x: Vec<f64> = obs.iter().map(|o| libm::log(o.0)).collect();
    let m_hat: f64 = w.iter().zip(&x).map(|(w, x)| w * x).sum();
    let v_hat: f64 = w
        .iter()
        .zip(&x)
        .map(|(w, x)| w * (x - m_hat) * (x - m_hat))
        .sum();
    let s = obs.len() as f64;
    let k = dist.kappa;
    let mu = (k * dist.mu_log + s * m_hat) / (k + s);
    let var = (k * dist.sigma_log * dist.sigma_log + s * v_hat) / (k + s);
    let sigma = libm::fmax(dist.sigma_floor, libm::sqrt(var));
    Ok(StepDistribution {
        mu_log: mu,
        sigma_log: sigma,
        ..*dist
    })
}

/// Grows the number of speculative candidates while the pass time stays
/// close to the single-candidate baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeculationController {
    s: usize,
    s_max: usize,
    growth: f64,
    shrink: f64,
    baseline: Option<f64>,
    frozen: bool,
}

impl Default for SpeculationController {
    fn default() -> Self {
        SpeculationController::new(32, 0.10, 0.25).expect("valid defaults")
    }
}

impl SpeculationController {
    pub fn new(s_max: usize, growth: f64, shrink: f64) -> Result<Self> {
        if s_max == 0 || !(growth >= 0.0) || !(shrink >= 0.0) {
            return Err(Error::Config("speculation limits must be positive".into()));
        }
        Ok(SpeculationController {
            s: 1,
            s_max,
            growth,
            shrink,
            baseline: None,
            frozen: false,
        })
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Feeds the wall time (seconds) of a pass run with the current `s` and
    /// returns the `s` to use next.
    pub fn adapt_s(&mut self, iter_time: f64) -> usize {
        let Some(base) = self.baseline else {
            self.baseline = Some(iter_time);
            if self.s_max > 1 {
                self.s = 2;
            } else {
                self.frozen = true;
            }
            return self.s;
        };
        if !self.frozen {
            if iter_time <= (1.0 + self.growth) * base {
                if self.s >= self.s_max {
                    self.frozen = true;
                } else {
                    self.s = (self.s * 2).min(self.s_max);
                }
            } else {
                self.s = (self.s / 2).max(1);
                self.frozen = true;
            }
        } else if iter_time > (1.0 + self.shrink) * base {
            self.s = (self.s / 2).max(1);
        }
        self.s
    }
}

/// Joint Gaussian over (step size, batch size) for mini-batch passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepBatchDistribution {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub kappa: f64,
}

/// Smallest step a mini-batch candidate may use.
pub const MIN_STEP: f64 = 1e-8;

impl StepBatchDistribution {
    pub fn new(mean: [f64; 2], cov: [[f64; 2]; 2], kappa: f64) -> Result<Self> {
        if !mean.iter().all(|m| m.is_finite()) || !cov.iter().flatten().all(|c| c.is_finite()) {
            return Err(Error::Config("mean and covariance must be finite".into()));
        }
        if cov[0][1] != cov[1][0] {
            return Err(Error::Config("covariance must be symmetric".into()));
        }
        if !(kappa > 0.0) {
            return Err(Error::Config(alloc::format!(
                "kappa must be > 0, got {kappa}"
            )));
        }
        cholesky(&cov)?;
        Ok(StepBatchDistribution { mean, cov, kappa })
    }

    /// Step 0.1 and batch 1000; variances 0.1 and 10000, covariance 10.
    pub fn standard() -> Self {
        StepBatchDistribution {
            mean: [0.1, 1000.0],
            cov: [[0.1, 10.0], [10.0, 10000.0]],
            kappa: 1.0,
        }
    }

    /// Unclamped draws from the Gaussian.
    pub fn sample_raw(&self, s: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
        let l = cholesky(&self.cov)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..s)
            .map(|_| {
                let z0: f64 = StandardNormal.sample(&mut rng);
                let z1: f64 = StandardNormal.sample(&mut rng);
                [
                    self.mean[0] + l[0][0] * z0,
                    self.mean[1] + l[1][0] * z0 + l[1][1] * z1,
                ]
            })
            .collect())
    }

    /// Usable `(step, batch)` pairs: steps clamped to at least `MIN_STEP`,
    /// batches rounded and clamped to `[1, n_examples]`.
    pub fn sample(&self, s: usize, seed: u64, n_examples: u64) -> Result<Vec<(f64, u64)>> {
        if s == 0 {
            return Err(Error::Config("need at least one candidate".into()));
        }
        if n_examples == 0 {
            return Err(Error::Config("empty dataset".into()));
        }
        Ok(self
            .sample_raw(s, seed)?
            .into_iter()
            .map(|[a, b]| {
                let batch = libm::round(b).clamp(1.0, n_examples as f64) as u64;
                (libm::fmax(a, MIN_STEP), batch)
            })
            .collect())
    }
}

/// Lower-triangular factor of a symmetric positive semi-definite 2x2 matrix.
/// Zero pivots give a zero column so a degenerate covariance still samples
/// (at the mean along that direction).
pub fn cholesky(c: &[[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let not_psd = || Error::Numeric("covariance is not positive semi-definite".into());
    if c[0][0] < 0.0 {
        return Err(not_psd());
    }
    let l00 = libm::sqrt(c[0][0]);
    let l10 = if l00 > 0.0 {
        c[1][0] / l00
    } else if c[1][0] == 0.0 {
        0.0
    } else {
        return Err(not_psd());
    };
    let rem = c[1][1] - l10 * l10;
    if rem < 0.0 {
        return Err(not_psd());
    }
    Ok([[l00, 0.0], [l10, libm::sqrt(rem)]])
}

/// Loss-weighted update of the joint distribution; `obs` holds
/// `(step, batch, loss)` triples.
pub fn bayes_update_2d(
    dist: &StepBatchDistribution,
    obs: &[(f64, f64, f64)],
) -> Result<StepBatchDistribution> {
    if obs.is_empty() {
        return Err(Error::Structural("no observations".into()));
    }
    if obs.iter().any(|o| !o.0.is_finite() || !o.1.is_finite()) {
        return Err(Error::NonFinite {
            what: "observed step or batch",
        });
    }
    let w = loss_weights(obs.iter().map(|o| o.2))?;
    if dist.kappa.is_infinite() {
        return Ok(*dist);
    }
    let mut m = [0.0; 2];
    for (wi, o) in w.iter().zip(obs) {
        m[0] += wi * o.0;
        m[1] += wi * o.1;
    }
    let mut sc = [[0.0; 2]; 2];
    for (wi, o) in w.iter().zip(obs) {
        let d = [o.0 - m[0], o.1 - m[1]];
        for r in 0..2 {
            for c in 0..2 {
                sc[r][c] += wi * d[r] * d[c];
            }
        }
    }
    let s = obs.len() as f64;
    let k = dist.kappa;
    let mean = [
        (k * dist.mean[0] + s * m[0]) / (k + s),
        (k * dist.mean[1] + s * m[1]) / (k + s),
    ];
    let mut cov = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            cov[r][c] = (k * dist.cov[r][c] + s * sc[r][c]) / (k + s);
        }
    }
    cov[1][0] = cov[0][1];
    let mut jitter = 1e-9;
    for _ in 0..20 {
        if cholesky(&cov).is_ok() {
            return Ok(StepBatchDistribution {
                mean,
                cov,
                kappa: k,
            });
        }
        cov[0][0] += jitter;
        cov[1][1] += jitter;
        jitter *= 10.0;
    }
    Err(Error::Numeric(
        "posterior covariance could not be repaired".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frozen_bayes_example() {
        let prior = StepDistribution::new(libm::log(0.01), 1.0, 1.0, 0.05).unwrap();
        let post = bayes_update(&prior, &[(0.1, 1.0), (0.001, 100.0)]).unwrap();
        let want = (libm::log(0.01) + 2.0 * libm::log(0.1)) / 3.0;
        assert!((post.mu_log - want).abs() < 1e-12);
        // v_hat = 0: (1 * 1 + 2 * 0) / 3
        assert!((post.sigma_log - libm::sqrt(1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn equal_losses_weight_uniformly() {
        let prior = StepDistribution::new(0.0, 1.0, 1.0, 0.05).unwrap();
        let post = bayes_update(&prior, &[(1.0, 5.0), (libm::exp(2.0), 5.0)]).unwrap();
        // m_hat = 1, v_hat = 1
        assert!((post.mu_log - 2.0 / 3.0).abs() < 1e-12);
        assert!((post.sigma_log - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infinite_kappa_keeps_prior_and_floor_holds() {
        let frozen = StepDistribution::new(1.0, 2.0, f64::INFINITY, 0.05).unwrap();
        assert_eq!(
            bayes_update(&frozen, &[(0.5, 1.0), (0.1, 2.0)]).unwrap(),
            frozen
        );
        let tight = StepDistribution::new(0.0, 0.06, 1.0, 0.05).unwrap();
        let post = bayes_update(&tight, &[(1.0, 0.0), (2.0, 1.0), (3.0, 1.0)]).unwrap();
        assert_eq!(post.sigma_log, 0.05);
    }

    #[test]
    fn bayes_rejects_bad_input() {
        let d = StepDistribution::new(0.0, 1.0, 1.0, 0.05).unwrap();
        assert!(bayes_update(&d, &[]).is_err());
        assert!(bayes_update(&d, &[(0.1, f64::NAN)]).is_err());
        assert!(bayes_update(&d, &[(-0.1, 1.0)]).is_err());
    }

    #[test]
    fn samples_are_sorted_positive_and_reproducible() {
        let d = StepDistribution::new(libm::log(0.01), 1.0, 1.0, 0.05).unwrap();
        let a = sample_steps(&d, 16, 7).unwrap();
        assert_eq!(a, sample_steps(&d, 16, 7).unwrap());
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
        assert!(a.iter().all(|&x| x > 0.0));
        assert!(sample_steps(&d, 0, 7).is_err());
        let narrow = StepDistribution {
            sigma_log: 1e-300,
            ..d
        };
        assert!(sample_steps(&narrow, 5, 1)
            .unwrap()
            .iter()
            .all(|&x| x == libm::exp(d.mu_log)));
    }

    #[test]
    fn controller_doubles_then_freezes() {
        let mut c = SpeculationController::default();
        assert_eq!(c.s(), 1);
        assert_eq!(c.adapt_s(1.0), 2);
        assert_eq!(c.adapt_s(1.05), 4);
        assert_eq!(c.adapt_s(1.2), 2);
        assert!(c.is_frozen());
        assert_eq!(c.adapt_s(1.2), 2);
        assert_eq!(c.adapt_s(1.3), 1);
    }

    #[test]
    fn controller_caps_at_s_max() {
        let mut c = SpeculationController::new(4, 0.1, 0.25).unwrap();
        for _ in 0..5 {
            c.adapt_s(1.0);
        }
        assert_eq!(c.s(), 4);
        assert!(c.is_frozen());
        assert_eq!(c.adapt_s(1.3), 2);
    }

    #[test]
    fn two_dim_sampling_clamps() {
        let d = StepBatchDistribution::standard();
        let pairs = d.sample(2000, 3, 1500).unwrap();
        assert!(pairs
            .iter()
            .all(|&(a, b)| a >= MIN_STEP && (1..=1500).contains(&b)));
        let degenerate =
            StepBatchDistribution::new([0.2, 50.0], [[0.0, 0.0], [0.0, 0.0]], 1.0).unwrap();
        assert!(degenerate
            .sample(10, 1, 100)
            .unwrap()
            .iter()
            .all(|&p| p == (0.2, 50)));
        assert!(StepBatchDistribution::new([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]], 1.0).is_err());
    }

    #[test]
    fn two_dim_update_moves_towards_low_loss() {
        let d = StepBatchDistribution::standard();
        let post = bayes_update_2d(&d, &[(0.2, 500.0, 1.0), (0.05, 2000.0, 10.0)]).unwrap();
        assert!((post.mean[0] - (0.1 + 2.0 * 0.2) / 3.0).abs() < 1e-12);
        assert!((post.mean[1] - (1000.0 + 2.0 * 500.0) / 3.0).abs() < 1e-9);
        assert!(cholesky(&post.cov).is_ok());
        let frozen = StepBatchDistribution {
            kappa: f64::INFINITY,
            ..d
        };
        assert_eq!(
            bayes_update_2d(&frozen, &[(0.2, 500.0, 1.0)]).unwrap(),
            frozen
        );
    }

    proptest! {
        #[test]
        fn bayes_is_shift_invariant(
            ls in proptest::collection::vec(-1000i32..1000, 1..8),
            shift in -1000i32..1000,
        ) {
            // integer losses keep the differences exact
            let d = StepDistribution::new(-3.0, 1.5, 2.0, 0.05).unwrap();
            let obs: Vec<(f64, f64)> = ls.iter().enumerate().map(|(i, &l)| (0.01 * (i + 1) as f64, l as f64)).collect();
            let moved: Vec<(f64, f64)> = obs.iter().map(|&(a, l)| (a, l + shift as f64)).collect();
            prop_assert_eq!(bayes_update(&d, &obs).unwrap(), bayes_update(&d, &moved).unwrap());
        }

        #[test]
        fn posterior_mean_stays_within_hull(
            ls in proptest::collection::vec(0f64..100.0, 1..8),
            mu in -8f64..0.0,
        ) {
            let d = StepDistribution::new(mu, 1.0, 1.0, 0.05).unwrap();
            let obs: Vec<(f64, f64)> = ls.iter().enumerate().map(|(i, &l)| (libm::exp(-(i as f64)), l)).collect();
            let lo = obs.iter().map(|o| libm::log(o.0)).fold(mu, libm::fmin);
            let hi = obs.iter().map(|o| libm::log(o.0)).fold(mu, libm::fmax);
            let p = bayes_update(&d, &obs).unwrap();
            prop_assert!(p.mu_log >= lo - 1e-12 && p.mu_log <= hi + 1e-12);
            prop_assert!(p.sigma_log >= d.sigma_floor);
        }
    }
}
