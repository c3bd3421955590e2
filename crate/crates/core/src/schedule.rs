//! When to pause a pass and test the estimates.
//!
//! Checks are geometric in the number of examples seen (1%, 2%, 4%, ... of
//! the pass) so testing costs a logarithmic number of merges. When the loss
//! estimate stops moving between two checks the gap is halved instead, which
//! lets a pass that is about to converge stop sooner.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckSchedule {
    population: u64,
    first: u64,
    gap: u64,
    next: u64,
}

impl CheckSchedule {
    pub const DEFAULT_FIRST_FRACTION: f64 = 0.01;

    pub fn new(population: u64, first_fraction: f64) -> Result<Self> {
        if population == 0 {
            return Err(Error::Config("empty pass".into()));
        }
        if !(first_fraction > 0.0 && first_fraction <= 1.0) {
            return Err(Error::Config(alloc::format!(
                "first check fraction must be in (0, 1], got {first_fraction}"
            )));
        }
        let first = (libm::ceil(population as f64 * first_fraction) as u64)
            .clamp(2.min(population), population);
        Ok(CheckSchedule {
            population,
            first,
            gap: first,
            next: first,
        })
    }

    /// Example count at which the next check is due.
    pub fn next_target(&self) -> u64 {
        self.next
    }

    /// Records a check made after `seen` examples. `stagnant` says whether
    /// the loss moved less than the stagnation threshold since the previous check.
    pub fn advance(&mut self, seen: u64, stagnant: bool) {
        self.gap = if stagnant {
            (self.gap / 2).max(self.first)
        } else {
            seen.max(self.first)
        };
        self.next = seen.saturating_add(self.gap).min(self.population);
    }
}

/// Relative change used for the stagnation test.
pub fn relative_change(prev: f64, cur: f64) -> f64 {
    libm::fabs(cur - prev) / libm::fmax(libm::fabs(prev), crate::estimator::REL_FLOOR)
}
