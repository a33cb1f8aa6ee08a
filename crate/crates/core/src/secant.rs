//! Low-rank secant model of the posterior-mean Jacobian used by SA-MC.
//!
//! `B = gamma I + U Gamma U^T` is rebuilt every step by replaying a FIFO of
//! damped secant pairs, then factored as `B = L L^T` through a reduced QR of
//! `U` and a small Cholesky factorization.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::costmodel::CostOracle;
use crate::error::{Error, Result};
use crate::guide::{tilted_mean, GuidanceDiag, NoiseMap};
use crate::rng::{self, Rng};
use crate::schedule::{Schedule, StepCoeffs};

#[derive(Debug, Clone, PartialEq)]
pub struct SecantPair {
    pub s: DVector<f64>,
    pub y_hat: DVector<f64>,
    pub u: f64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryQueue {
    capacity: usize,
    pairs: VecDeque<SecantPair>,
}

impl MemoryQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            pairs: VecDeque::with_capacity(capacity.max(1) + 1),
        }
    }

    /// Appends `pair`; returns the evicted oldest pair when full.
    pub fn push(&mut self, pair: SecantPair) -> Option<SecantPair> {
        self.pairs.push_back(pair);
        if self.pairs.len() > self.capacity {
            self.pairs.pop_front()
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &SecantPair> {
        self.pairs.iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactB {
    pub gamma: f64,
    /// Interleaved `(s, y_hat)` columns, oldest first.
    pub u: DMatrix<f64>,
    pub big_gamma: DMatrix<f64>,
}

impl CompactB {
    pub fn identity(dim: usize, gamma: f64) -> Self {
        Self {
            gamma,
            u: DMatrix::zeros(dim, 0),
            big_gamma: DMatrix::zeros(0, 0),
        }
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// `gamma x + U Gamma (U^T x)`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x * self.gamma;
        if self.rank() > 0 {
            let q = self.u.tr_mul(x);
            out += &self.u * (&self.big_gamma * q);
        }
        out
    }

    /// Dense `d x d` matrix; for tests and oracles.
    pub fn dense(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::identity(d, d) * self.gamma + &self.u * &self.big_gamma * self.u.transpose()
    }
}

/// Damped target `y_hat = phi y + (1 - phi) B s` keeping
/// `s^T y_hat` within `[(1 - sigma2), (1 + sigma3)] * s^T B s`.
pub fn damp(y: &DVector<f64>, s: &DVector<f64>, b: &CompactB, sigma2: f64, sigma3: f64) -> Result<(DVector<f64>, f64)> {
    let bs = b.apply(s);
    let sbs = s.dot(&bs);
    if !(sbs > 0.0) {
        return Err(Error::LostPositiveDefiniteness);
    }
    let tau = s.dot(y) / sbs;
    let phi = if tau < 1.0 - sigma2 {
        sigma2 / (1.0 - tau)
    } else if tau > 1.0 + sigma3 {
        sigma3 / (tau - 1.0)
    } else {
        1.0
    };
    Ok((y * phi + bs * (1.0 - phi), phi))
}

/// Replays `pairs` (oldest first) from `gamma_init * I`.
pub fn update_b<'a>(pairs: impl IntoIterator<Item = &'a SecantPair>, gamma_init: f64, dim: usize) -> Result<CompactB> {
    if !(gamma_init > 0.0) {
        return Err(Error::InvalidArgument("gamma_init must be > 0".into()));
    }
    let mut b = CompactB::identity(dim, gamma_init);
    for p in pairs {
        let sy = p.y_hat.dot(&p.s);
        if !(sy > 0.0) {
            return Err(Error::CurvatureViolated);
        }
        let rho = 1.0 / sy;
        let gamma = b.gamma;
        let ss = p.s.dot(&p.s);
        let m = b.rank();
        let mut u = DMatrix::zeros(dim, m + 2);
        u.columns_mut(0, m).copy_from(&b.u);
        u.set_column(m, &p.s);
        u.set_column(m + 1, &p.y_hat);
        let mut g = DMatrix::zeros(m + 2, m + 2);
        let tau = if m == 0 {
            0.0
        } else {
            let q = b.u.tr_mul(&p.s);
            let pv = &b.big_gamma * &q;
            g.view_mut((0, 0), (m, m)).copy_from(&b.big_gamma);
            for i in 0..m {
                g[(i, m + 1)] = -rho * pv[i];
                g[(m + 1, i)] = -rho * pv[i];
            }
            q.dot(&pv)
        };
        g[(m, m + 1)] = -gamma * rho;
        g[(m + 1, m)] = -gamma * rho;
        g[(m + 1, m + 1)] = rho + rho * rho * (tau + gamma * ss);
        b = CompactB {
            gamma: p.u * gamma + p.w,
            u,
            big_gamma: g * p.u,
        };
    }
    Ok(b)
}

/// Implicit `L` with `L L^T = B`:
/// `L x = sqrt(gamma) x + Q (L_C - sqrt(gamma) I) Q^T x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SqrtFactor {
    pub sqrt_gamma: f64,
    pub q: DMatrix<f64>,
    pub core: DMatrix<f64>,
    /// Diagonal jitter that made the Cholesky succeed (0 if none).
    pub jitter: f64,
    /// True when the isotropic fallback `sqrt(gamma) I` was used.
    pub fallback: bool,
}

impl SqrtFactor {
    pub fn isotropic(dim: usize, gamma: f64) -> Self {
        Self {
            sqrt_gamma: gamma.sqrt(),
            q: DMatrix::zeros(dim, 0),
            core: DMatrix::zeros(0, 0),
            jitter: 0.0,
            fallback: false,
        }
    }

    pub fn apply_l(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x * self.sqrt_gamma;
        if self.q.ncols() > 0 {
            out += &self.q * (&self.core * self.q.tr_mul(x));
        }
        out
    }

    pub fn apply_lt(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x * self.sqrt_gamma;
        if self.q.ncols() > 0 {
            out += &self.q * self.core.tr_mul(&self.q.tr_mul(x));
        }
        out
    }

    /// `L E` for a matrix of column vectors.
    pub fn apply_l_cols(&self, e: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = e * self.sqrt_gamma;
        if self.q.ncols() > 0 {
            out += &self.q * (&self.core * self.q.tr_mul(e));
        }
        out
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let d = self.q.nrows();
        let mut l = DMatrix::identity(d, d) * self.sqrt_gamma;
        if self.q.ncols() > 0 {
            l += &self.q * &self.core * self.q.transpose();
        }
        l
    }
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Factor of `B` from a reduced QR of `U` and the Cholesky factor of
/// `C = gamma I + R Gamma R^T`. Falls back to `sqrt(gamma) I` (flagged)
/// if `C` is not positive definite even after jitter.
pub fn semi_numerical_sqrt(b: &CompactB) -> Result<SqrtFactor> {
    if !(b.gamma > 0.0) {
        return Err(Error::LostPositiveDefiniteness);
    }
    let d = b.dim();
    if b.rank() == 0 {
        return Ok(SqrtFactor::isotropic(d, b.gamma));
    }
    let qr = b.u.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let rr = q.ncols();
    let mut c = &r * &b.big_gamma * r.transpose();
    for i in 0..rr {
        c[(i, i)] += b.gamma;
    }
    let c = (&c + c.transpose()) * 0.5;
    let sg = b.gamma.sqrt();
    let finish = |lc: DMatrix<f64>, jitter: f64| {
        let mut core = lc;
        for i in 0..rr {
            core[(i, i)] -= sg;
        }
        SqrtFactor {
            sqrt_gamma: sg,
            q: q.clone(),
            core,
            jitter,
            fallback: false,
        }
    };
    if let Some(ch) = c.clone().cholesky() {
        return Ok(finish(ch.l(), 0.0));
    }
    let scale = (c.trace() / rr as f64).max(1.0);
    let mut eps = JITTER_START * scale;
    while eps <= JITTER_MAX * scale * (1.0 + 1e-12) {
        let mut cj = c.clone();
        for i in 0..rr {
            cj[(i, i)] += eps;
        }
        if let Some(ch) = cj.cholesky() {
            return Ok(finish(ch.l(), eps));
        }
        eps *= 10.0;
    }
    let mut f = SqrtFactor::isotropic(d, b.gamma);
    f.fallback = true;
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SecantConfig {
    pub memory: usize,
    pub sigma2: f64,
    pub sigma3: f64,
    pub damping: bool,
    /// Initial `gamma` before any pair is observed.
    pub gamma0: f64,
    /// Scale the noise map by the heuristic std so that the proposal
    /// covariance is `(sigma^2 / alpha) B`.
    pub scale_noise: bool,
}

impl Default for SecantConfig {
    fn default() -> Self {
        Self {
            memory: 8,
            sigma2: 0.2,
            sigma3: 1.0,
            damping: true,
            gamma0: 1.0,
            scale_noise: true,
        }
    }
}

/// Diagnostics of one secant update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairDiag {
    pub phi: f64,
    pub s_yhat: f64,
    pub s_bs: f64,
    pub gamma: f64,
    pub evicted: bool,
    /// `|(B s - w s)/u - y_hat| / |y_hat|` on the rebuilt `B`.
    pub secant_residual: f64,
    /// `(1-sigma2) s^T B s <= s^T y_hat <= (1+sigma3) s^T B s`.
    pub band_ok: bool,
}

/// Per-trajectory SA-MC state.
#[derive(Debug, Clone)]
pub struct SecantState {
    pub queue: MemoryQueue,
    pub b: CompactB,
    prev: Option<(DVector<f64>, DVector<f64>, f64)>,
    pub rng: Rng,
}

impl SecantState {
    pub fn new(dim: usize, cfg: &SecantConfig, rng: Rng) -> Self {
        Self {
            queue: MemoryQueue::new(cfg.memory),
            b: CompactB::identity(dim, cfg.gamma0),
            prev: None,
            rng,
        }
    }

    /// Secant update from the previous `(x, v, t)` to the current one.
    /// Returns `None` on the first call and for degenerate steps.
    pub fn observe(
        &mut self,
        x: &DVector<f64>,
        v: &DVector<f64>,
        t: f64,
        sched: &Schedule,
        cfg: &SecantConfig,
    ) -> Result<Option<PairDiag>> {
        let prev = self.prev.replace((x.clone(), v.clone(), t));
        let Some((xp, vp, tp)) = prev else {
            return Ok(None);
        };
        let s = x - &xp;
        if s.norm() <= 1e-12 * (1.0 + x.norm()) {
            return Ok(None);
        }
        let r = v - &vp;
        let c = sched.coeffs(tp);
        let StepCoeffs { u, w } = sched.step_coeffs(tp, t);
        let y = (&s * (-c.a) + r) / c.b;
        let bs = self.b.apply(&s);
        let s_bs = s.dot(&bs);
        let (y_hat, phi) = if cfg.damping {
            damp(&y, &s, &self.b, cfg.sigma2, cfg.sigma3)?
        } else {
            (y, 1.0)
        };
        let s_yhat = s.dot(&y_hat);
        let gamma_hat = s_yhat / s.dot(&s);
        let pair = SecantPair {
            s: s.clone(),
            y_hat: y_hat.clone(),
            u,
            w,
        };
        let evicted = self.queue.push(pair).is_some();
        self.b = update_b(self.queue.iter(), gamma_hat, x.len())?;
        let bs_new = self.b.apply(&s);
        let secant_residual = ((bs_new - &s * w) / u - &y_hat).norm() / y_hat.norm();
        let slack = 1e-12 * s_bs.abs();
        Ok(Some(PairDiag {
            phi,
            s_yhat,
            s_bs,
            gamma: self.b.gamma,
            evicted,
            secant_residual,
            band_ok: (1.0 - cfg.sigma2) * s_bs <= s_yhat + slack && s_yhat <= (1.0 + cfg.sigma3) * s_bs + slack,
        }))
    }
}

/// Guidance of one SA-MC step for a single trajectory at `(x, t)` with
/// precomputed velocity `v`. Returns `g = b_t * shift` and diagnostics.
#[allow(clippy::too_many_arguments)]
pub fn sa_mc_guidance<C: CostOracle + ?Sized>(
    state: &mut SecantState,
    x: &DVector<f64>,
    v: &DVector<f64>,
    t: f64,
    sched: &Schedule,
    cost: &C,
    lambda: f64,
    n_mc: usize,
    antithetic: bool,
    cfg: &SecantConfig,
) -> Result<(DVector<f64>, GuidanceDiag)> {
    let pd = state.observe(x, v, t, sched, cfg)?;
    let c = sched.coeffs(t);
    let x1_pred = x * (-c.a / c.b) + v / c.b;
    let factor = semi_numerical_sqrt(&state.b)?;
    let scale = if cfg.scale_noise {
        Schedule::heuristic_std(t, 1e-3)
    } else {
        1.0
    };
    let noise = NoiseMap::Factor { factor: &factor, scale };
    let (shift, mut diag) = tilted_mean(&x1_pred, &noise, cost, lambda, n_mc, antithetic, &mut state.rng)?;
    let g = &shift * c.b;
    diag.g_norm = g.norm();
    diag.prefactor = c.b;
    diag.raw = shift.iter().copied().collect();
    diag.gamma = Some(state.b.gamma);
    diag.m = state.b.rank();
    diag.jitter = factor.jitter;
    diag.fallback = factor.fallback;
    if let Some(p) = pd {
        diag.phi = Some(p.phi);
        diag.s_yhat = Some(p.s_yhat);
        diag.s_bs = Some(p.s_bs);
        diag.secant_residual = Some(p.secant_residual);
        diag.band_ok = Some(p.band_ok);
        diag.evicted = p.evicted;
    }
    Ok((g, diag))
}

/// Relative factorization error `|L L^T p - B p| / |B p|` on a random probe.
pub fn factor_probe(b: &CompactB, f: &SqrtFactor, rng: &mut Rng) -> f64 {
    let p = DVector::from_vec(rng::normal_vec(rng, b.dim()));
    let bp = b.apply(&p);
    (f.apply_l(&f.apply_lt(&p)) - &bp).norm() / bp.norm()
}
