//! Variance-preserving log-SNR schedules and ELBO loss weights.
//!
//! The cosine schedule is `α = cos(πu/2)`, `σ = sin(πu/2)`, so
//! `λ = log(α²/σ²) = −2 log tan(πu/2)`. Boundary clamping restricts `u` to
//! `[t_lo, t_hi]`, the interval on which `λ ∈ [λ_min, λ_max]`, and maps
//! `t ∈ [0, 1]` linearly onto it.

use std::f64::consts::PI;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

/// One evaluation of a schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrPoint {
    pub t: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub dlambda_dt: f64,
}

impl SnrPoint {
    /// A point known only by its log-SNR. `t` and the derivative are NaN, so
    /// this is only meant for formulas that need `α` and `σ`.
    pub fn at_lambda(lambda: f64) -> Self {
        let alpha2 = 1.0 / (1.0 + (-lambda).exp());
        let sigma2 = 1.0 / (1.0 + lambda.exp());
        Self {
            t: f64::NAN,
            lambda,
            alpha: alpha2.sqrt(),
            sigma: sigma2.sqrt(),
            dlambda_dt: f64::NAN,
        }
    }

    /// The ELBO weight `−dλ/dt · e^λ`, before the loss weighting `w(λ)`.
    pub fn elbo_factor(&self) -> f64 {
        -self.dlambda_dt * self.lambda.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogSnrSchedule {
    pub kind: ScheduleKind,
    pub lambda_min: f64,
    pub lambda_max: f64,
    t_lo: f64,
    t_hi: f64,
}

fn cosine_u_of_lambda(lambda: f64) -> f64 {
    // tan(πu/2) = exp(−λ/2)
    (2.0 / PI) * (-lambda / 2.0).exp().atan()
}

impl LogSnrSchedule {
    /// Cosine schedule clamped to `[lambda_min, lambda_max]`. Infinite
    /// boundaries are allowed and leave that end unclamped.
    pub fn cosine(lambda_min: f64, lambda_max: f64) -> Result<Self> {
        if lambda_min.is_nan() || lambda_max.is_nan() || lambda_min >= lambda_max {
            return Err(Error::config(format!(
                "log-SNR boundaries must satisfy lambda_min < lambda_max, got ({lambda_min}, {lambda_max})"
            )));
        }
        let t_lo = cosine_u_of_lambda(lambda_max);
        let t_hi = cosine_u_of_lambda(lambda_min);
        Ok(Self {
            kind: ScheduleKind::Cosine,
            lambda_min,
            lambda_max,
            t_lo,
            t_hi,
        })
    }

    pub fn cosine_unclamped() -> Self {
        Self::cosine(f64::NEG_INFINITY, f64::INFINITY).expect("infinite bounds are ordered")
    }

    /// Raw-schedule times where `λ` reaches `lambda_max` and `lambda_min`.
    pub fn raw_interval(&self) -> (f64, f64) {
        (self.t_lo, self.t_hi)
    }

    fn remap(&self, t: f64) -> f64 {
        if t == 0.0 {
            self.t_lo
        } else if t == 1.0 {
            self.t_hi
        } else {
            self.t_lo + t * (self.t_hi - self.t_lo)
        }
    }

    pub fn eval(&self, t: f64) -> Result<SnrPoint> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Invalid(format!("schedule time {t} outside [0, 1]")));
        }
        let u = self.remap(t);
        let half = PI * u / 2.0;
        let (sigma, alpha) = half.sin_cos();
        let lambda = if t == 0.0 && self.lambda_max.is_finite() {
            self.lambda_max
        } else if t == 1.0 && self.lambda_min.is_finite() {
            self.lambda_min
        } else {
            2.0 * (alpha.ln() - sigma.ln())
        };
        let dlambda_dt = -2.0 * PI / (PI * u).sin() * (self.t_hi - self.t_lo);
        Ok(SnrPoint {
            t,
            lambda,
            alpha,
            sigma,
            dlambda_dt,
        })
    }

    /// Inverse of `t ↦ λ(t)`, clamped to the boundaries.
    pub fn t_of_lambda(&self, lambda: f64) -> f64 {
        let lambda = lambda.clamp(self.lambda_min, self.lambda_max);
        let u = cosine_u_of_lambda(lambda);
        ((u - self.t_lo) / (self.t_hi - self.t_lo)).clamp(0.0, 1.0)
    }
}

impl Default for LogSnrSchedule {
    fn default() -> Self {
        Self::cosine(-12.0, 12.0).expect("default bounds are ordered")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    #[default]
    Sigmoid,
    Unit,
}

/// Loss weight `w(λ)`: `sigmoid(λ − b)` or the strict-ELBO constant 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeight {
    pub bias: f64,
    pub mode: WeightMode,
}

impl LossWeight {
    pub fn sigmoid(bias: f64) -> Self {
        Self {
            bias,
            mode: WeightMode::Sigmoid,
        }
    }

    pub fn unit() -> Self {
        Self {
            bias: 0.0,
            mode: WeightMode::Unit,
        }
    }

    pub fn value(&self, lambda: f64) -> f64 {
        match self.mode {
            WeightMode::Sigmoid => 1.0 / (1.0 + (self.bias - lambda).exp()),
            WeightMode::Unit => 1.0,
        }
    }

    /// Full per-example factor `−dλ/dt · e^λ · w(λ)`.
    pub fn factor(&self, point: &SnrPoint) -> f64 {
        point.elbo_factor() * self.value(point.lambda)
    }
}

impl Default for LossWeight {
    fn default() -> Self {
        Self::sigmoid(1.0)
    }
}
