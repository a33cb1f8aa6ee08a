//! Randomized verification suites built on [`crate::oracle`]. Each returns a
//! serializable report with a `pass` flag; `cmd_check` aggregates them.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::Serialize;

use crate::costmodel::QuadraticCost;
use crate::error::Result;
use crate::field2d::{self, Geometry, WorldSpec};
use crate::flow::{OdeConfig, SamplerTrace, VelocityField};
use crate::guide::{self, GuidanceConfig, GuidanceMethod};
use crate::oracle::{self, BoundReport, GaussianWorld};
use crate::rng::{self, Rng};
use crate::schedule::Schedule;
use crate::secant::{self, CompactB, SecantPair};

fn randn(r: &mut Rng, n: usize) -> DVector<f64> {
    DVector::from_vec(rng::normal_vec(r, n))
}

/// SPD matrix with eigenvalues in `[lo, hi]`.
pub fn random_spd(r: &mut Rng, d: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let q = DMatrix::from_column_slice(d, d, &rng::normal_vec(r, d * d)).qr().q();
    let ev = DVector::from_iterator(d, (0..d).map(|_| r.gen_range(lo..hi)));
    let m = &q * DMatrix::from_diagonal(&ev) * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Damped secant pairs along a rectified-linear time grid from a noisy
/// linear velocity model; damping is applied against the running compact
/// `B` (all pairs kept).
pub fn random_damped_pairs(r: &mut Rng, d: usize, k: usize) -> Result<Vec<SecantPair>> {
    let sched = Schedule::default();
    let a = DMatrix::from_column_slice(d, d, &rng::normal_vec(r, d * d)) * (0.5 / (d as f64).sqrt());
    let mut pairs = Vec::with_capacity(k);
    let mut b = CompactB::identity(d, 1.0);
    let dt = 0.9 / k as f64;
    for i in 0..k {
        let t = 0.05 + i as f64 * dt;
        let s = randn(r, d);
        let y = &s + &a * &s + randn(r, d) * 0.3;
        let (y_hat, _) = secant::damp(&y, &s, &b, 0.2, 1.0)?;
        let sc = sched.step_coeffs(t, t + dt);
        pairs.push(SecantPair {
            s,
            y_hat,
            u: sc.u,
            w: sc.w,
        });
        b = secant::update_b(&pairs, 1.0, d)?;
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub n_sequences: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compact replay versus the literal dense recursion.
pub fn compact_equivalence(seed: u64, n_sequences: usize, d: usize, k: usize) -> Result<EquivalenceReport> {
    let mut max = 0.0f64;
    for i in 0..n_sequences {
        let mut r = rng::substream(seed, "check/equivalence", i as u64);
        let pairs = random_damped_pairs(&mut r, d, k)?;
        let g0 = r.gen_range(0.5..2.0);
        let compact = secant::update_b(&pairs, g0, d)?.dense();
        let dense = oracle::dense_b_recursion(&pairs, g0, d)?;
        max = max.max((&compact - &dense).norm() / dense.norm());
    }
    Ok(EquivalenceReport {
        n_sequences,
        max_rel_err: max,
        pass: max <= 1e-10,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FactorReport {
    pub n_instances: usize,
    pub max_rel_err: f64,
    pub max_probe_err: f64,
    pub fallbacks: usize,
    pub diagonal_exact: bool,
    pub pass: bool,
}

/// `|L L^T - B|_F / |B|_F` on random compact instances with `d <= max_d`
/// and rank `m <= max_m`, densified through probes of `L` and `L^T`.
pub fn factorization(seed: u64, n_instances: usize, max_d: usize, max_m: usize) -> Result<FactorReport> {
    let mut max = 0.0f64;
    let mut max_probe = 0.0f64;
    let mut fallbacks = 0;
    for i in 0..n_instances {
        let mut r = rng::substream(seed, "check/factor", i as u64);
        let d = r.gen_range(2..=max_d);
        let n_pairs = r.gen_range(1..=max_m / 2);
        let pairs = random_damped_pairs(&mut r, d, n_pairs)?;
        let b = secant::update_b(&pairs, r.gen_range(0.5..2.0), d)?;
        let f = secant::semi_numerical_sqrt(&b)?;
        fallbacks += f.fallback as usize;
        let eye = DMatrix::identity(d, d);
        let mut l = DMatrix::zeros(d, d);
        for j in 0..d {
            l.set_column(j, &f.apply_l(&eye.column(j).into_owned()));
        }
        let bd = b.dense();
        max = max.max((&l * l.transpose() - &bd).norm() / bd.norm());
        max_probe = max_probe.max(secant::factor_probe(&b, &f, &mut r));
    }
    let diag = CompactB {
        gamma: 1.0,
        u: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        big_gamma: DMatrix::from_element(1, 1, 3.0),
    };
    let diagonal_exact =
        secant::semi_numerical_sqrt(&diag)?.dense() == DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
    Ok(FactorReport {
        n_instances,
        max_rel_err: max,
        max_probe_err: max_probe,
        fallbacks,
        diagonal_exact,
        pass: max <= 1e-8 && fallbacks == 0 && diagonal_exact,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CurvatureReport {
    pub n_updates: usize,
    pub max_secant_residual: f64,
    pub band_violations: usize,
    pub fallbacks: usize,
    pub pass: bool,
}

/// Secant residual and curvature band over every accepted update of SA-MC
/// runs on a Gaussian world.
pub fn curvature(seed: u64, n_traj: usize) -> Result<CurvatureReport> {
    let mut r = rng::substream(seed, "check/curvature", 0);
    let world = GaussianWorld::from_parts(randn(&mut r, 2) * 0.5, random_spd(&mut r, 2, 0.3, 2.5))?;
    let a = random_spd(&mut r, 2, 0.5, 2.0);
    let cost = QuadraticCost { a, c: randn(&mut r, 2) };
    let ode = OdeConfig {
        n_steps: 100,
        n_trace: n_traj,
        ..Default::default()
    };
    let cfg = GuidanceConfig {
        method: GuidanceMethod::SaMc,
        ..Default::default()
    };
    let out = guide::guided_sample(&world, &cost, &cfg, 2.0, &ode, n_traj, seed)?;
    Ok(curvature_from_traces(&out.traces))
}

/// Scans SA-MC traces for accepted updates.
pub fn curvature_from_traces(traces: &[SamplerTrace]) -> CurvatureReport {
    let mut rep = CurvatureReport {
        n_updates: 0,
        max_secant_residual: 0.0,
        band_violations: 0,
        fallbacks: 0,
        pass: false,
    };
    for tr in traces {
        for s in &tr.steps {
            rep.fallbacks += s.diag.fallback as usize;
            if let (Some(res), Some(band)) = (s.diag.secant_residual, s.diag.band_ok) {
                rep.n_updates += 1;
                rep.max_secant_residual = rep.max_secant_residual.max(res);
                rep.band_violations += (!band) as usize;
            }
        }
    }
    rep.pass = rep.n_updates > 0 && rep.max_secant_residual <= 1e-8 && rep.band_violations == 0;
    rep
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreReport {
    /// Worst `|score + 2x|` at `t = 0.5` with `S = I`.
    pub max_err_half: f64,
    /// Worst deviation from the analytic score on the `9 x 9 x 5` grid.
    pub max_err_grid: f64,
    pub pass: bool,
}

pub fn score_sign() -> Result<ScoreReport> {
    let sched = Schedule::default();
    let w = GaussianWorld::standard(2);
    let grid: Vec<f64> = (0..9).map(|i| -2.0 + 0.5 * i as f64).collect();
    let times = [0.1, 0.3, 0.5, 0.7, 0.9];
    let mut half = 0.0f64;
    let mut max = 0.0f64;
    for &a in &grid {
        for &b in &grid {
            let x = DVector::from_column_slice(&[a, b]);
            let v = w.analytic_velocity(&x, 0.5);
            let s = sched.score_from_velocity(x.as_slice(), v.as_slice(), 0.5);
            half = half.max((s[0] + 2.0 * a).abs()).max((s[1] + 2.0 * b).abs());
            for &t in &times {
                let v = w.analytic_velocity(&x, t);
                let s = DVector::from_vec(sched.score_from_velocity(x.as_slice(), v.as_slice(), t));
                max = max.max((s - w.analytic_score(&x, t)).amax());
            }
        }
    }
    Ok(ScoreReport {
        max_err_half: half,
        max_err_grid: max,
        pass: half <= 1e-10 && max <= 1e-8,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub reports: Vec<BoundReport>,
    pub min_slack: f64,
    /// `|g_LGD - g_SIM|` with the exact posterior covariance as proposal.
    pub zero_gap_norm: f64,
    pub pass: bool,
}

struct GapConfig {
    world: GaussianWorld,
    cost: QuadraticCost,
    lambda: f64,
    x: DVector<f64>,
    t: f64,
}

fn gap_config(seed: u64, i: usize) -> Result<(GapConfig, DMatrix<f64>)> {
    let mut r = rng::substream(seed, "check/gap", i as u64);
    let world = GaussianWorld::from_parts(randn(&mut r, 2) * 0.5, random_spd(&mut r, 2, 0.3, 2.5))?;
    let cost = QuadraticCost {
        a: random_spd(&mut r, 2, 0.3, 2.0),
        c: randn(&mut r, 2),
    };
    let t = r.gen_range(0.15..0.85);
    let x = randn(&mut r, 2);
    let lambda = r.gen_range(0.5..3.0);
    let sigma = random_spd(&mut r, 2, 0.05, 1.0);
    Ok((
        GapConfig {
            world,
            cost,
            lambda,
            x,
            t,
        },
        sigma,
    ))
}

/// The LGD/SIM gap bound on random quadratic-cost Gaussian configurations.
pub fn lgd_sim_gap(seed: u64, n_configs: usize) -> Result<GapReport> {
    let mut reports = Vec::with_capacity(n_configs);
    for i in 0..n_configs {
        let (c, sigma) = gap_config(seed, i)?;
        reports.push(oracle::check_theorem2(
            &c.world, &c.cost, c.lambda, &c.x, c.t, &sigma, 40,
        )?);
    }
    let (c, _) = gap_config(seed, n_configs)?;
    let (_, exact) = c.world.analytic_posterior(&c.x, c.t);
    let z = oracle::check_theorem2(&c.world, &c.cost, c.lambda, &c.x, c.t, &exact, 40)?;
    let min_slack = reports.iter().map(|r| r.slack()).fold(f64::INFINITY, f64::min);
    let zero_gap_norm = z.lhs.sqrt();
    Ok(GapReport {
        pass: reports.iter().all(|r| r.pass) && min_slack >= 1.0 && zero_gap_norm <= 1e-8,
        reports,
        min_slack,
        zero_gap_norm,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct McComponent {
    pub method: &'static str,
    pub config: usize,
    pub estimate: Vec<f64>,
    pub truth: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Largest `|estimate - truth| / std_err` over components.
    pub max_z: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct McReport {
    pub n_mc: usize,
    pub rows: Vec<McComponent>,
    pub min_ess: f64,
    pub max_z: f64,
    pub pass: bool,
}

/// Self-normalized estimate `sum w_i h_i` and its delta-method standard error
/// `sqrt(sum w_i^2 (h_i - est)^2)` per component.
fn weighted_mean_se(w: &[f64], h: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let d = h.nrows();
    let mut est = DVector::zeros(d);
    for (i, wi) in w.iter().enumerate() {
        est.axpy(*wi, &h.column(i), 1.0);
    }
    let mut var = DVector::zeros(d);
    for (i, wi) in w.iter().enumerate() {
        for k in 0..d {
            var[k] += wi * wi * (h[(k, i)] - est[k]).powi(2);
        }
    }
    (est, var.map(f64::sqrt))
}

/// Random Gaussian-world configuration whose cost center lies within the
/// proposal spread of the posterior mean, so the tilted law overlaps the
/// proposal and the self-normalized weights are not degenerate.
fn mc_config(seed: u64, i: usize) -> Result<GapConfig> {
    let mut r = rng::substream(seed, "check/mc-config", i as u64);
    let world = GaussianWorld::from_parts(randn(&mut r, 2) * 0.5, random_spd(&mut r, 2, 0.3, 2.5))?;
    let t = r.gen_range(0.15..0.85);
    let x = randn(&mut r, 2);
    let lambda = r.gen_range(0.5..3.0);
    let (mu, _) = world.analytic_posterior(&x, t);
    let std = Schedule::heuristic_std(t, 1e-3);
    let cost = QuadraticCost {
        a: random_spd(&mut r, 2, 0.3, 2.0),
        c: mu + randn(&mut r, 2) * std,
    };
    Ok(GapConfig {
        world,
        cost,
        lambda,
        x,
        t,
    })
}

/// SIM-MC and LGD-MC at `n_mc` samples against Gauss–Hermite truth with an
/// isotropic proposal; passes when every component is within 3 standard errors.
pub fn mc_vs_quadrature(seed: u64, n_configs: usize, n_mc: usize) -> Result<McReport> {
    let sched = Schedule::default();
    let mut rows = Vec::new();
    let mut min_ess = f64::INFINITY;
    for i in 0..n_configs {
        let c = mc_config(seed, i)?;
        let std = Schedule::heuristic_std(c.t, 1e-3);
        let xm = DMatrix::from_column_slice(2, 1, c.x.as_slice());
        let v = c.world.velocity(&xm, c.t)?;
        let (mu, _) = c.world.analytic_posterior(&c.x, c.t);
        let jac = c.world.posterior_jacobian(c.t);
        let sigma = DMatrix::identity(2, 2) * (std * std);
        let q = oracle::quadrature_guidance(&c.cost, c.lambda, &mu, &sigma, &jac, &sched, c.t, 40)?;
        let co = sched.coeffs(c.t);

        let base = rng::substream(seed, "check/mc", i as u64);
        let mut r = base.clone();
        let (g, _) = guide::g_sim_mc_with(&sched, &c.cost, &xm, &v, c.t, c.lambda, std, n_mc, false, &mut [&mut r])?;
        let mut r = base.clone();
        let xi = guide::standard_normals(2, n_mc, false, &mut r) * std;
        let (w, ess) = guide::tilted_weights(&mu, &xi, &c.cost, c.lambda)?;
        min_ess = min_ess.min(ess);
        let (est, se) = weighted_mean_se(&w, &(&xi * co.b));
        debug_assert!((g.column(0) - &est).amax() <= 1e-12 * (1.0 + est.amax()));
        rows.push(component("sim_mc", i, &g.column(0).into_owned(), &q.g_sim, &se));

        let mut r = base.clone();
        let (g, _) = guide::g_lgd_mc_with(
            &c.world,
            &c.cost,
            &xm,
            &v,
            c.t,
            c.lambda,
            std,
            n_mc,
            false,
            &mut [&mut r],
        )?;
        let mut r = base;
        let eps = guide::standard_normals(2, n_mc, false, &mut r);
        let mut x1 = eps * std;
        for mut col in x1.column_iter_mut() {
            col += &mu;
        }
        let xi = &x1 - DMatrix::from_fn(2, n_mc, |k, _| mu[k]);
        let (w, _) = guide::tilted_weights(&mu, &xi, &c.cost, c.lambda)?;
        let (_, grads) = crate::costmodel::CostOracle::value_grad(&c.cost, &x1, c.lambda)?;
        let h = jac.transpose() * grads * (-co.s);
        let (_, se) = weighted_mean_se(&w, &h);
        rows.push(component("lgd_mc", i, &g.column(0).into_owned(), &q.g_lgd, &se));
    }
    let max_z = rows.iter().map(|r| r.max_z).fold(0.0, f64::max);
    Ok(McReport {
        n_mc,
        rows,
        min_ess,
        max_z,
        pass: max_z <= 3.0,
    })
}

fn component(method: &'static str, config: usize, est: &DVector<f64>, truth: &[f64], se: &DVector<f64>) -> McComponent {
    let max_z = (0..est.len())
        .map(|k| (est[k] - truth[k]).abs() / se[k])
        .fold(0.0, f64::max);
    McComponent {
        method,
        config,
        estimate: est.iter().copied().collect(),
        truth: truth.to_vec(),
        std_err: se.iter().copied().collect(),
        max_z,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SmallLambdaReport {
    pub ratios: Vec<f64>,
    pub cs_ok: bool,
    pub pass: bool,
}

/// Grid-exact `SKL / (λ^2 Var_p(J_theta - J))` for random smooth bounded
/// perturbations, plus the Cauchy–Schwarz bound at a moderate λ.
pub fn small_lambda(seed: u64, n_perturb: usize, grid: usize, lambda: f64) -> Result<SmallLambdaReport> {
    let spec = WorldSpec {
        seed,
        geometry: Geometry::square(3.5, grid),
        ..Default::default()
    };
    let p = spec.density()?;
    let j = spec.cost()?.values;
    let mut ratios = Vec::with_capacity(n_perturb);
    let mut cs_ok = true;
    for i in 0..n_perturb {
        let mut r = rng::substream(seed, "check/perturb", i as u64);
        let amp = r.gen_range(0.2..1.0);
        let delta = field2d::make_grf(spec.geometry, 0.5, 1.0, &mut r)?;
        let jt: Vec<f64> = j.iter().zip(&delta.values).map(|(a, d)| a + amp * d.tanh()).collect();
        ratios.push(oracle::check_skl_small_lambda(&p, &j, &jt, lambda)?.ratio);
        cs_ok &= oracle::check_skl_small_lambda(&p, &j, &jt, 1.0)?.cs_ok;
    }
    Ok(SmallLambdaReport {
        pass: ratios.iter().all(|r| (0.95..=1.05).contains(r)) && cs_ok,
        ratios,
        cs_ok,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub equivalence: EquivalenceReport,
    pub factorization: FactorReport,
    pub curvature: CurvatureReport,
    pub score_sign: ScoreReport,
    pub lgd_sim_gap: GapReport,
    pub small_lambda: SmallLambdaReport,
    pub pass: bool,
}

/// Every check at its default size.
pub fn run_all(seed: u64) -> Result<CheckReport> {
    let equivalence = compact_equivalence(seed, 20, 16, 20)?;
    let factorization = factorization(seed, 100, 64, 16)?;
    let curvature = curvature(seed, 16)?;
    let score_sign = score_sign()?;
    let lgd_sim_gap = lgd_sim_gap(seed, 10)?;
    let small_lambda = small_lambda(seed, 5, 128, 1e-3)?;
    let pass = equivalence.pass
        && factorization.pass
        && curvature.pass
        && score_sign.pass
        && lgd_sim_gap.pass
        && small_lambda.pass;
    Ok(CheckReport {
        equivalence,
        factorization,
        curvature,
        score_sign,
        lgd_sim_gap,
        small_lambda,
        pass,
    })
}
