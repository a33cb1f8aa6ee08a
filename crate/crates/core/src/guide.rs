//! Training-free guidance: DPS, LGD-MC, SIM-MC and SA-MC estimators of the
//! drift correction steering samples toward `p(x) exp(-J(x, λ))`.
//!
//! Every estimator returns `g = prefactor * raw` with the prefactor applied
//! exactly once: `s_t` for the gradient estimators (DPS, LGD-MC) and `b_t`
//! for the tilted-mean estimators (SIM-MC, SA-MC).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::costmodel::CostOracle;
use crate::error::{Error, Result};
use crate::flow::{self, OdeConfig, SampleOutput, StepGuidance, VelocityField};
use crate::rng::{self, Rng};
use crate::schedule::Schedule;
use crate::secant::{self, SecantConfig, SecantState, SqrtFactor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMethod {
    None,
    Dps,
    LgdMc,
    SimMc,
    SaMc,
}

impl GuidanceMethod {
    pub const ALL: [GuidanceMethod; 5] = [
        GuidanceMethod::None,
        GuidanceMethod::Dps,
        GuidanceMethod::LgdMc,
        GuidanceMethod::SimMc,
        GuidanceMethod::SaMc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GuidanceMethod::None => "none",
            GuidanceMethod::Dps => "dps",
            GuidanceMethod::LgdMc => "lgd_mc",
            GuidanceMethod::SimMc => "sim_mc",
            GuidanceMethod::SaMc => "sa_mc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub method: GuidanceMethod,
    /// Monte Carlo size `S`.
    pub n_mc: usize,
    pub antithetic: bool,
    /// `eps` of the heuristic std `(1 - t + eps) / sqrt(t + eps)`.
    pub heuristic_eps: f64,
    /// Overrides the heuristic proposal std of LGD-MC.
    pub lgd_std: Option<f64>,
    pub secant: SecantConfig,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            method: GuidanceMethod::SaMc,
            n_mc: 32,
            antithetic: false,
            heuristic_eps: 1e-3,
            lgd_std: None,
            secant: SecantConfig::default(),
        }
    }
}

impl GuidanceConfig {
    fn validate(&self) -> Result<()> {
        if self.n_mc == 0 {
            return Err(Error::InvalidArgument("n_mc must be >= 1".into()));
        }
        if self.secant.memory == 0 {
            return Err(Error::InvalidArgument("memory must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-step diagnostics of one trajectory.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct GuidanceDiag {
    pub g_norm: f64,
    pub prefactor: f64,
    /// The estimator before its prefactor, so `g = prefactor * raw`.
    pub raw: Vec<f64>,
    pub ess: Option<f64>,
    pub phi: Option<f64>,
    pub gamma: Option<f64>,
    pub m: usize,
    pub jitter: f64,
    pub fallback: bool,
    pub skipped: bool,
    pub evicted: bool,
    pub s_yhat: Option<f64>,
    pub s_bs: Option<f64>,
    pub secant_residual: Option<f64>,
    pub band_ok: Option<bool>,
}

/// How standard normal draws become proposal offsets `xi`.
pub enum NoiseMap<'a> {
    Isotropic(f64),
    Factor { factor: &'a SqrtFactor, scale: f64 },
}

impl NoiseMap<'_> {
    fn apply(&self, eps: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            NoiseMap::Isotropic(s) => eps * *s,
            NoiseMap::Factor { factor, scale } => factor.apply_l_cols(eps) * *scale,
        }
    }
}

/// Normalized weights `omega_i / sum omega` of the points `x1_pred + xi_i`
/// under `exp(-J)`, with max-subtraction; also returns the ESS.
pub fn tilted_weights<C: CostOracle + ?Sized>(
    x1_pred: &DVector<f64>,
    xi: &DMatrix<f64>,
    cost: &C,
    lambda: f64,
) -> Result<(Vec<f64>, f64)> {
    let mut x1 = xi.clone();
    for mut c in x1.column_iter_mut() {
        c += x1_pred;
    }
    let ell: Vec<f64> = cost.value(&x1, lambda)?.into_iter().map(|j| -j).collect();
    if ell.iter().any(|l| l.is_nan()) {
        return Err(Error::CostOverflow);
    }
    let lmax = ell.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lmax.is_finite() {
        return Err(Error::CostOverflow);
    }
    let w: Vec<f64> = ell.iter().map(|l| (l - lmax).exp()).collect();
    let z: f64 = w.iter().sum();
    let z2: f64 = w.iter().map(|w| w * w).sum();
    Ok((w.into_iter().map(|w| w / z).collect(), z * z / z2))
}

/// Self-normalized tilted mean of explicit offsets `xi` around `x1_pred`.
pub fn tilted_shift<C: CostOracle + ?Sized>(
    x1_pred: &DVector<f64>,
    xi: &DMatrix<f64>,
    cost: &C,
    lambda: f64,
) -> Result<(DVector<f64>, f64)> {
    let (w, ess) = tilted_weights(x1_pred, xi, cost, lambda)?;
    let mut shift = DVector::zeros(x1_pred.len());
    for (c, wi) in xi.column_iter().zip(&w) {
        shift.axpy(*wi, &c, 1.0);
    }
    Ok((shift, ess))
}

/// `d x n` standard normals; with `antithetic`, columns `2j` and `2j + 1`
/// are negatives of each other.
pub fn standard_normals(d: usize, n: usize, antithetic: bool, rng: &mut Rng) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(d, n);
    if antithetic {
        // interleaved pairs keep the running sums exactly antisymmetric
        for j in 0..n / 2 {
            rng::fill_normal(rng, e.column_mut(2 * j).as_mut_slice());
            let c = -e.column(2 * j);
            e.set_column(2 * j + 1, &c);
        }
        if n % 2 == 1 {
            rng::fill_normal(rng, e.column_mut(n - 1).as_mut_slice());
        }
    } else {
        rng::fill_normal(rng, e.as_mut_slice());
    }
    e
}

/// Unscaled tilted-mean shift `sum_i omega_i xi_i / sum_i omega_i` with
/// `xi_i = noise(eps_i)` and `omega_i ∝ exp(-J(x1_pred + xi_i, λ))`.
pub fn tilted_mean<C: CostOracle + ?Sized>(
    x1_pred: &DVector<f64>,
    noise: &NoiseMap,
    cost: &C,
    lambda: f64,
    n_mc: usize,
    antithetic: bool,
    rng: &mut Rng,
) -> Result<(DVector<f64>, GuidanceDiag)> {
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be >= 1".into()));
    }
    let eps = standard_normals(x1_pred.len(), n_mc, antithetic, rng);
    let xi = noise.apply(&eps);
    let (shift, ess) = tilted_shift(x1_pred, &xi, cost, lambda)?;
    Ok((
        shift,
        GuidanceDiag {
            ess: Some(ess),
            ..Default::default()
        },
    ))
}

fn posterior_means(sched: &Schedule, x: &DMatrix<f64>, v: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let c = sched.coeffs(t);
    x * (-c.a / c.b) + v / c.b
}

/// `(d mu / d x)^T cot` per column: `-(a/b) cot + (1/b) (dv/dx)^T cot`.
fn mean_vjp<F: VelocityField + ?Sized>(
    field: &F,
    x: &DMatrix<f64>,
    t: f64,
    cot: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let c = field.schedule().coeffs(t);
    Ok(cot * (-c.a / c.b) + field.vjp(x, t, cot)? / c.b)
}

fn finish(g_raw: DMatrix<f64>, pref: f64, mut diags: Vec<GuidanceDiag>) -> Result<(DMatrix<f64>, Vec<GuidanceDiag>)> {
    let g = &g_raw * pref;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::TrajectoryDiverged { step: 0 });
    }
    for (j, d) in diags.iter_mut().enumerate() {
        d.prefactor = pref;
        d.raw = g_raw.column(j).iter().copied().collect();
        d.g_norm = g.column(j).norm();
    }
    Ok((g, diags))
}

/// DPS: `g = -s_t grad_x J(mu(x_t), λ)` with the chain rule through the
/// velocity field. `v` is the velocity at `(x, t)`.
pub fn g_dps_with<F: VelocityField + ?Sized, C: CostOracle + ?Sized>(
    field: &F,
    cost: &C,
    x: &DMatrix<f64>,
    v: &DMatrix<f64>,
    t: f64,
    lambda: f64,
) -> Result<(DMatrix<f64>, Vec<GuidanceDiag>)> {
    let sched = field.schedule();
    let mu = posterior_means(&sched, x, v, t);
    let (_, grad) = cost.value_grad(&mu, lambda)?;
    let raw = -mean_vjp(field, x, t, &grad)?;
    finish(raw, sched.coeffs(t).s, vec![GuidanceDiag::default(); x.ncols()])
}

pub fn g_dps<F: VelocityField + ?Sized, C: CostOracle + ?Sized>(
    field: &F,
    cost: &C,
    x: &DMatrix<f64>,
    t: f64,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let v = field.velocity(x, t)?;
    Ok(g_dps_with(field, cost, x, &v, t, lambda)?.0)
}

/// LGD-MC: `g = s_t grad_x log mean_i exp(-J(mu(x_t) + std * eps_i))` with
/// the proposal spread treated as independent of `x_t`. One rng per column.
#[allow(clippy::too_many_arguments)]
pub fn g_lgd_mc_with<F: VelocityField + ?Sized, C: CostOracle + ?Sized>(
    field: &F,
    cost: &C,
    x: &DMatrix<f64>,
    v: &DMatrix<f64>,
    t: f64,
    lambda: f64,
    std: f64,
    n_mc: usize,
    antithetic: bool,
    rngs: &mut [&mut Rng],
) -> Result<(DMatrix<f64>, Vec<GuidanceDiag>)> {
    let sched = field.schedule();
    let (d, n) = x.shape();
    let mu = posterior_means(&sched, x, v, t);
    let mut x1 = DMatrix::zeros(d, n * n_mc);
    for j in 0..n {
        let eps = standard_normals(d, n_mc, antithetic, rngs[j]);
        for i in 0..n_mc {
            let mut col = x1.column_mut(j * n_mc + i);
            col.copy_from(&(eps.column(i) * std + mu.column(j)));
        }
    }
    let (vals, grads) = cost.value_grad(&x1, lambda)?;
    let mut gbar = DMatrix::zeros(d, n);
    let mut diags = Vec::with_capacity(n);
    for j in 0..n {
        let ell: Vec<f64> = vals[j * n_mc..(j + 1) * n_mc].iter().map(|v| -v).collect();
        let lmax = ell.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !lmax.is_finite() {
            return Err(Error::CostOverflow);
        }
        let w: Vec<f64> = ell.iter().map(|l| (l - lmax).exp()).collect();
        let z: f64 = w.iter().sum();
        let z2: f64 = w.iter().map(|w| w * w).sum();
        let mut acc = DVector::zeros(d);
        for (i, wi) in w.iter().enumerate() {
            acc.axpy(wi / z, &grads.column(j * n_mc + i), 1.0);
        }
        gbar.set_column(j, &acc);
        diags.push(GuidanceDiag {
            ess: Some(z * z / z2),
            ..Default::default()
        });
    }
    let raw = -mean_vjp(field, x, t, &gbar)?;
    finish(raw, sched.coeffs(t).s, diags)
}

/// SIM-MC: `g = b_t * tilted_mean(mu(x_t), std * eps)`.
#[allow(clippy::too_many_arguments)]
pub fn g_sim_mc_with<C: CostOracle + ?Sized>(
    sched: &Schedule,
    cost: &C,
    x: &DMatrix<f64>,
    v: &DMatrix<f64>,
    t: f64,
    lambda: f64,
    std: f64,
    n_mc: usize,
    antithetic: bool,
    rngs: &mut [&mut Rng],
) -> Result<(DMatrix<f64>, Vec<GuidanceDiag>)> {
    let mu = posterior_means(sched, x, v, t);
    let mut raw = DMatrix::zeros(x.nrows(), x.ncols());
    let mut diags = Vec::with_capacity(x.ncols());
    for j in 0..x.ncols() {
        let (shift, diag) = tilted_mean(
            &mu.column(j).into_owned(),
            &NoiseMap::Isotropic(std),
            cost,
            lambda,
            n_mc,
            antithetic,
            rngs[j],
        )?;
        raw.set_column(j, &shift);
        diags.push(diag);
    }
    finish(raw, sched.coeffs(t).b, diags)
}

/// Per-trajectory sampler state.
pub struct TrajState {
    pub rng: Rng,
    pub secant: Option<SecantState>,
}

/// Guidance hook for [`flow::integrate`].
pub struct Guided<'a, F: ?Sized, C: ?Sized> {
    pub field: &'a F,
    pub cost: &'a C,
    pub lambda: f64,
    pub cfg: GuidanceConfig,
    pub seed: u64,
}

impl<F: VelocityField + ?Sized, C: CostOracle + ?Sized> StepGuidance for Guided<'_, F, C> {
    type State = TrajState;

    fn init_state(&self, traj: usize) -> TrajState {
        let rng = rng::substream(self.seed, "guide/mc", traj as u64);
        let secant = (self.cfg.method == GuidanceMethod::SaMc).then(|| {
            SecantState::new(
                self.field.dim(),
                &self.cfg.secant,
                rng::substream(self.seed, "guide/sa", traj as u64),
            )
        });
        TrajState { rng, secant }
    }

    fn guidance(
        &self,
        states: &mut [TrajState],
        x: &DMatrix<f64>,
        v: &DMatrix<f64>,
        k: usize,
        t: f64,
        _t_next: f64,
    ) -> Result<(DMatrix<f64>, Vec<GuidanceDiag>)> {
        let sched = self.field.schedule();
        let h = Schedule::heuristic_std(t, self.cfg.heuristic_eps);
        let c = &self.cfg;
        let res = match c.method {
            GuidanceMethod::None => Ok((
                DMatrix::zeros(x.nrows(), x.ncols()),
                vec![GuidanceDiag::default(); x.ncols()],
            )),
            GuidanceMethod::Dps => g_dps_with(self.field, self.cost, x, v, t, self.lambda),
            GuidanceMethod::LgdMc => {
                let mut rngs: Vec<&mut Rng> = states.iter_mut().map(|s| &mut s.rng).collect();
                let std = c.lgd_std.unwrap_or(h);
                g_lgd_mc_with(
                    self.field,
                    self.cost,
                    x,
                    v,
                    t,
                    self.lambda,
                    std,
                    c.n_mc,
                    c.antithetic,
                    &mut rngs,
                )
            }
            GuidanceMethod::SimMc => {
                let mut rngs: Vec<&mut Rng> = states.iter_mut().map(|s| &mut s.rng).collect();
                g_sim_mc_with(
                    &sched,
                    self.cost,
                    x,
                    v,
                    t,
                    self.lambda,
                    h,
                    c.n_mc,
                    c.antithetic,
                    &mut rngs,
                )
            }
            GuidanceMethod::SaMc => {
                let mut g = DMatrix::zeros(x.nrows(), x.ncols());
                let mut diags = Vec::with_capacity(x.ncols());
                for (j, st) in states.iter_mut().enumerate() {
                    let sec = st.secant.as_mut().expect("secant state");
                    let (gj, mut dj) = secant::sa_mc_guidance(
                        sec,
                        &x.column(j).into_owned(),
                        &v.column(j).into_owned(),
                        t,
                        &sched,
                        self.cost,
                        self.lambda,
                        c.n_mc,
                        c.antithetic,
                        &c.secant,
                    )?;
                    dj.skipped = k > 0 && dj.phi.is_none();
                    g.set_column(j, &gj);
                    diags.push(dj);
                }
                Ok((g, diags))
            }
        };
        res.map_err(|e| match e {
            Error::TrajectoryDiverged { .. } => Error::TrajectoryDiverged { step: k },
            e => e,
        })
    }
}

/// Guided generation of `n` trajectories. `GuidanceMethod::None` runs the
/// plain sampler.
pub fn guided_sample<F: VelocityField + ?Sized, C: CostOracle + ?Sized>(
    field: &F,
    cost: &C,
    cfg: &GuidanceConfig,
    lambda: f64,
    ode: &OdeConfig,
    n: usize,
    seed: u64,
) -> Result<SampleOutput> {
    cfg.validate()?;
    if cfg.method == GuidanceMethod::None {
        return flow::sample_ode(field, n, ode, seed);
    }
    let g = Guided {
        field,
        cost,
        lambda,
        cfg: cfg.clone(),
        seed,
    };
    flow::integrate(field, &g, n, ode, seed)
}
