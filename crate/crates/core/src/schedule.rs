//! Affine flow path and its time-dependent coefficients.
//!
//! The path is `x_t = alpha_t * x_1 + sigma_t * eps` with noise at `t = 0`
//! and data at `t = 1`. Derived quantities:
//!
//! * `a_t = sigma_dot / sigma`
//! * `b_t = (alpha_dot * sigma - sigma_dot * alpha) / sigma`
//! * `s_t = b_t * sigma^2 / alpha`
//!
//! `a`, `b` and `s` are singular at one of the endpoints, so they are
//! evaluated at a time clamped to `[eps_t, 1 - eps_t]`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    /// `alpha_t = t`, `sigma_t = 1 - t`.
    #[default]
    RectifiedLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: PathKind,
    pub eps_t: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            kind: PathKind::RectifiedLinear,
            eps_t: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub alpha_dot: f64,
    pub sigma_dot: f64,
    pub a: f64,
    pub b: f64,
    pub s: f64,
}

/// Inter-step factors relating the posterior-mean Jacobian at consecutive
/// grid times: `B_{k+1} = u * B~ + w * I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoeffs {
    pub u: f64,
    pub w: f64,
}

impl Schedule {
    pub fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.eps_t, 1.0 - self.eps_t)
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            PathKind::RectifiedLinear => t,
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            PathKind::RectifiedLinear => 1.0 - t,
        }
    }

    pub fn coeffs(&self, t: f64) -> Coeffs {
        let tc = self.clamp(t);
        match self.kind {
            PathKind::RectifiedLinear => Coeffs {
                t,
                alpha: t,
                sigma: 1.0 - t,
                alpha_dot: 1.0,
                sigma_dot: -1.0,
                a: -1.0 / (1.0 - tc),
                b: 1.0 / (1.0 - tc),
                s: (1.0 - tc) / tc,
            },
        }
    }

    /// `u = b(t_k) / b(t_next)`, `w = (a(t_k) - a(t_next)) / b(t_next)`.
    pub fn step_coeffs(&self, t_k: f64, t_next: f64) -> StepCoeffs {
        let ck = self.coeffs(t_k);
        let cn = self.coeffs(t_next);
        StepCoeffs {
            u: ck.b / cn.b,
            w: (ck.a - cn.a) / cn.b,
        }
    }

    /// `alpha_dot / alpha` at the clamped time.
    pub fn drift_ratio(&self, t: f64) -> f64 {
        let tc = self.clamp(t);
        match self.kind {
            PathKind::RectifiedLinear => 1.0 / tc,
        }
    }

    /// `E[x_1 | x_t] = -(a/b) x_t + v / b`.
    pub fn posterior_mean(&self, x_t: &[f64], v: &[f64], t: f64) -> Vec<f64> {
        let c = self.coeffs(t);
        x_t.iter().zip(v).map(|(x, v)| -(c.a / c.b) * x + v / c.b).collect()
    }

    /// Inverse of [`Schedule::posterior_mean`]: `v = b * mu + a * x_t`.
    pub fn velocity_from_mean(&self, x_t: &[f64], mu: &[f64], t: f64) -> Vec<f64> {
        let c = self.coeffs(t);
        x_t.iter().zip(mu).map(|(x, m)| c.b * m + c.a * x).collect()
    }

    /// Marginal score `grad log p_t(x) = (v - (alpha_dot/alpha) x) / s`.
    pub fn score_from_velocity(&self, x_t: &[f64], v: &[f64], t: f64) -> Vec<f64> {
        let s = self.coeffs(t).s;
        let r = self.drift_ratio(t);
        x_t.iter().zip(v).map(|(x, v)| (v - r * x) / s).collect()
    }

    /// Proposal standard deviation `(1 - t + eps) / sqrt(t + eps)`, which
    /// approximates `sigma_t / sqrt(alpha_t)`.
    pub fn heuristic_std(t: f64, eps: f64) -> f64 {
        (1.0 - t + eps) / (t + eps).sqrt()
    }
}
