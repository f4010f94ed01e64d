//! Forward diffusion process `dx = f(t) x dt + g(t) dB` and its closed-form
//! marginal coefficients.
//!
//! With `s_t = exp(∫ f)` and `σ_t² = ∫ g²/s²`, the marginal of the forward
//! process is `x_t ~ N(s_t x_0, γ_t² I)` where `γ_t = s_t σ_t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_T_MIN: f64 = 0.01;
pub const DEFAULT_T_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `f = 0`, `g = g0`.
    ConstantDrift { g0: f64 },
    /// `f = -beta/2`, `g = sqrt(beta)`.
    #[serde(rename = "vp")]
    VariancePreserving { beta: f64 },
}

/// Marginal coefficients at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub s: f64,
    pub sigma: f64,
    pub gamma: f64,
}

impl Coefficients {
    /// Coefficients given directly, used by analyses that fix `(s, γ)`.
    pub fn new(s: f64, gamma: f64) -> Self {
        Self {
            s,
            sigma: gamma / s,
            gamma,
        }
    }

    pub fn gamma2(&self) -> f64 {
        self.gamma * self.gamma
    }

    /// `s² / (s² + γ²)`, the shrinkage applied along unit factor directions.
    pub fn shrinkage(&self) -> f64 {
        let s2 = self.s * self.s;
        s2 / (s2 + self.gamma2())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    #[serde(flatten)]
    pub kind: ScheduleKind,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
}

fn default_t_min() -> f64 {
    DEFAULT_T_MIN
}

fn default_t_max() -> f64 {
    DEFAULT_T_MAX
}

impl DiffusionSchedule {
    pub fn new(kind: ScheduleKind, t_min: f64, t_max: f64) -> Result<Self> {
        let sched = Self { kind, t_min, t_max };
        sched.validate()?;
        Ok(sched)
    }

    pub fn constant_drift(g0: f64, t_min: f64, t_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::ConstantDrift { g0 }, t_min, t_max)
    }

    pub fn variance_preserving(beta: f64, t_min: f64, t_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::VariancePreserving { beta }, t_min, t_max)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0) {
            return Err(Error::InvalidScheduleParams(format!(
                "t_min must be positive, got {}",
                self.t_min
            )));
        }
        if !(self.t_min < self.t_max) || !self.t_max.is_finite() {
            return Err(Error::InvalidScheduleParams(format!(
                "t_min {} must be below t_max {}",
                self.t_min, self.t_max
            )));
        }
        let rate = match self.kind {
            ScheduleKind::ConstantDrift { g0 } => g0,
            ScheduleKind::VariancePreserving { beta } => beta,
        };
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::InvalidScheduleParams(format!(
                "rate parameter must be positive, got {rate}"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_min && t <= self.t_max
    }

    fn check(&self, t: f64) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::TimeOutOfRange {
                t,
                t_min: self.t_min,
                t_max: self.t_max,
            })
        }
    }

    /// Drift rate `f(t)`.
    pub fn drift(&self, _t: f64) -> f64 {
        match self.kind {
            ScheduleKind::ConstantDrift { .. } => 0.0,
            ScheduleKind::VariancePreserving { beta } => -0.5 * beta,
        }
    }

    /// Diffusion rate `g(t)`.
    pub fn diffusion(&self, _t: f64) -> f64 {
        match self.kind {
            ScheduleKind::ConstantDrift { g0 } => g0,
            ScheduleKind::VariancePreserving { beta } => beta.sqrt(),
        }
    }

    pub fn coefficients(&self, t: f64) -> Result<Coefficients> {
        self.check(t)?;
        Ok(self.coefficients_unchecked(t))
    }

    /// Closed forms valid for any `t ≥ 0`.
    pub fn coefficients_unchecked(&self, t: f64) -> Coefficients {
        match self.kind {
            ScheduleKind::ConstantDrift { g0 } => {
                let sigma = g0 * t.sqrt();
                Coefficients {
                    s: 1.0,
                    sigma,
                    gamma: sigma,
                }
            }
            ScheduleKind::VariancePreserving { beta } => {
                let s = (-0.5 * beta * t).exp();
                let sigma = (beta * t).exp_m1().sqrt();
                // γ² = 1 − e^{−βt} via expm1
                let gamma = (-(-beta * t).exp_m1()).sqrt();
                Coefficients { s, sigma, gamma }
            }
        }
    }

    pub fn gamma(&self, t: f64) -> Result<f64> {
        Ok(self.coefficients(t)?.gamma)
    }
}
