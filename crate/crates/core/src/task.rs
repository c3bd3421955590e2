//! Loss families, regularizers and the objective they define.
//!
//! The objective is `sum_i f(w, x_i; y_i) + mu * R(w)`. The regularizer is
//! added once per evaluation, never per example.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::vecmath::{all_finite, dot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossFamily {
    /// `max(0, 1 - y w.x)`
    SvmHinge,
    /// `ln(1 + exp(-y w.x))`
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regularizer {
    None,
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub family: LossFamily,
    pub reg: Regularizer,
    pub mu: f64,
}

impl TaskSpec {
    pub fn new(family: LossFamily, reg: Regularizer, mu: f64) -> Result<Self> {
        if !mu.is_finite() || mu < 0.0 {
            return Err(Error::Config(alloc::format!(
                "regularization weight must be finite and >= 0, got {mu}"
            )));
        }
        Ok(TaskSpec { family, reg, mu })
    }

    pub fn svm() -> Self {
        TaskSpec {
            family: LossFamily::SvmHinge,
            reg: Regularizer::None,
            mu: 0.0,
        }
    }

    pub fn logistic() -> Self {
        TaskSpec {
            family: LossFamily::Logistic,
            reg: Regularizer::None,
            mu: 0.0,
        }
    }

    /// Loss of one example given its margin `m = w.x`.
    #[inline]
    pub fn margin_loss(&self, y: f64, m: f64) -> f64 {
        match self.family {
            LossFamily::SvmHinge => {
                let h = 1.0 - y * m;
                if h > 0.0 {
                    h
                } else {
                    0.0
                }
            }
            LossFamily::Logistic => {
                let t = y * m;
                // ln(1 + e^-t) without overflow for large |t|
                let neg = if t < 0.0 { -t } else { 0.0 };
                neg + libm::log1p(libm::exp(-libm::fabs(t)))
            }
        }
    }

    /// Coefficient `c` such that the example gradient is `c * x`.
    #[inline]
    pub fn margin_coef(&self, y: f64, m: f64) -> f64 {
        match self.family {
            LossFamily::SvmHinge => {
                if 1.0 - y * m > 0.0 {
                    -y
                } else {
                    0.0
                }
            }
            LossFamily::Logistic => -y * sigmoid_neg(y * m),
        }
    }

    pub fn check_example(&self, w: &[f64], ex: ExampleRef<'_>) -> Result<()> {
        if w.len() != ex.features.len() {
            return Err(Error::DimensionMismatch {
                expected: w.len(),
                got: ex.features.len(),
            });
        }
        if !all_finite(w) {
            return Err(Error::NonFinite { what: "model" });
        }
        if !all_finite(ex.features) || !ex.label.is_finite() {
            return Err(Error::NonFinite { what: "example" });
        }
        Ok(())
    }

    /// `f(w, x; y)`; always `>= 0`.
    pub fn example_loss(&self, w: &[f64], ex: ExampleRef<'_>) -> Result<f64> {
        self.check_example(w, ex)?;
        Ok(self.margin_loss(ex.label, dot(w, ex.features)))
    }

    /// Gradient (subgradient 0 at the hinge kink) of one example's loss.
    pub fn example_gradient(&self, w: &[f64], ex: ExampleRef<'_>) -> Result<Vec<f64>> {
        self.check_example(w, ex)?;
        let c = self.margin_coef(ex.label, dot(w, ex.features));
        Ok(ex.features.iter().map(|&x| c * x).collect())
    }

    /// `mu * R(w)`.
    pub fn regularizer_value(&self, w: &[f64]) -> f64 {
        match self.reg {
            Regularizer::None => 0.0,
            Regularizer::L1 => self.mu * w.iter().map(|v| libm::fabs(*v)).sum::<f64>(),
            Regularizer::L2 => self.mu * w.iter().map(|v| v * v).sum::<f64>(),
        }
    }

    /// Writes `mu * dR/dw` into `out` (zeros for no regularizer; `sign(0) = 0` for L1).
    pub fn regularizer_gradient_into(&self, w: &[f64], out: &mut [f64]) {
        match self.reg {
            Regularizer::None => out.iter_mut().for_each(|o| *o = 0.0),
            Regularizer::L1 => {
                for (o, &v) in out.iter_mut().zip(w) {
                    *o = if v > 0.0 {
                        self.mu
                    } else if v < 0.0 {
                        -self.mu
                    } else {
                        0.0
                    };
                }
            }
            Regularizer::L2 => {
                for (o, &v) in out.iter_mut().zip(w) {
                    *o = 2.0 * self.mu * v;
                }
            }
        }
    }

    pub fn regularizer_gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; w.len()];
        self.regularizer_gradient_into(w, &mut out);
        out
    }

    /// Full objective over an in-memory example set, summed in order.
    pub fn objective<'a, I>(&self, w: &[f64], examples: I) -> Result<f64>
    where
        I: IntoIterator<Item = ExampleRef<'a>>,
    {
        let mut s = 0.0;
        for ex in examples {
            s += self.example_loss(w, ex)?;
        }
        Ok(s + self.regularizer_value(w))
    }
}

/// `1 / (1 + e^t)` evaluated on the branch that cannot overflow.
#[inline]
fn sigmoid_neg(t: f64) -> f64 {
    if t >= 0.0 {
        let e = libm::exp(-t);
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + libm::exp(t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub weights: Vec<f64>,
    pub iter: u64,
}

impl Model {
    pub fn zeros(d: usize) -> Self {
        Model {
            weights: vec![0.0; d],
            iter: 0,
        }
    }

    pub fn from_weights(weights: Vec<f64>) -> Self {
        Model { weights, iter: 0 }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: f64,
}

impl Example {
    /// Labels must be exactly `+1` or `-1`.
    pub fn new(features: Vec<f64>, label: f64) -> Result<Self> {
        if label != 1.0 && label != -1.0 {
            return Err(Error::Config(alloc::format!(
                "label must be +1 or -1, got {label}"
            )));
        }
        if !all_finite(&features) {
            return Err(Error::NonFinite { what: "example" });
        }
        Ok(Example { features, label })
    }

    pub fn as_ref(&self) -> ExampleRef<'_> {
        ExampleRef {
            features: &self.features,
            label: self.label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleRef<'a> {
    pub features: &'a [f64],
    pub label: f64,
}
