//! Point-solution inverse design: time-annealed density-gradient descent
//! and the cost-gradient-only baseline.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::costmodel::CostOracle;
use crate::error::{Error, Result};
use crate::field2d::{self, GridField};
use crate::flow::VelocityField;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealConfig {
    /// Number of iterations `K`.
    pub iters: usize,
    pub step_size: f64,
    pub t_max: f64,
    /// `t_min` ramps linearly from `t_min_start` to `t_min_end`.
    pub t_min_start: f64,
    pub t_min_end: f64,
    pub lambda: f64,
    /// Time draws averaged per iteration.
    pub n_t: usize,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            iters: 300,
            step_size: 0.01,
            t_max: 0.98,
            t_min_start: 0.02,
            t_min_end: 0.5,
            lambda: 1.0,
            n_t: 1,
            seed: 0,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.step_size > 0.0
            && self.n_t >= 1
            && 0.02 <= self.t_min_start
            && self.t_min_start <= self.t_min_end
            && self.t_min_end <= self.t_max
            && self.t_max <= 0.98;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "need step_size > 0, n_t >= 1 and 0.02 <= t_min_start <= t_min_end <= t_max <= 0.98".into(),
            ))
        }
    }

    /// Lower time bound at iteration `k`.
    pub fn t_min(&self, k: usize) -> f64 {
        let frac = if self.iters <= 1 {
            0.0
        } else {
            k as f64 / (self.iters - 1) as f64
        };
        (self.t_min_start + (self.t_min_end - self.t_min_start) * frac.min(1.0)).min(self.t_max)
    }
}

/// `alpha_t x + sigma_t eps` on the rectified-linear path.
pub fn add_noise(x: &[f64], t: f64, rng: &mut Rng) -> Vec<f64> {
    let mut eps = vec![0.0; x.len()];
    rng::fill_normal(rng, &mut eps);
    x.iter().zip(&eps).map(|(x, e)| t * x + (1.0 - t) * e).collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepDiag {
    /// Mean of the sampled times (NaN without a flow term).
    pub t: f64,
    pub g_norm: f64,
}

fn col(x: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(x.len(), 1, x)
}

/// One update `x - eta (grad J(x, λ) - score(x_t, t))` with `x_t` a noised
/// copy of `x`. Without a flow this is plain cost-gradient descent.
pub fn density_grad_step<F: VelocityField + ?Sized, C: CostOracle + ?Sized>(
    x: &[f64],
    cost: &C,
    flow: Option<&F>,
    cfg: &AnnealConfig,
    k: usize,
    rng: &mut Rng,
) -> Result<(Vec<f64>, StepDiag)> {
    let (_, gj) = cost.value_grad(&col(x), cfg.lambda)?;
    let mut g = DVector::from_iterator(x.len(), gj.column(0).iter().copied());
    let mut t_mean = f64::NAN;
    if let Some(f) = flow {
        let sched = f.schedule();
        let lo = cfg.t_min(k);
        let mut score = DVector::zeros(x.len());
        t_mean = 0.0;
        for _ in 0..cfg.n_t {
            let t = if cfg.t_max > lo {
                rng.gen_range(lo..cfg.t_max)
            } else {
                lo
            };
            let xt = add_noise(x, t, rng);
            let v = f.velocity(&col(&xt), t)?;
            let s = sched.score_from_velocity(&xt, v.as_slice(), t);
            score += DVector::from_vec(s);
            t_mean += t;
        }
        g -= score / cfg.n_t as f64;
        t_mean /= cfg.n_t as f64;
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::OptimizerDiverged { iteration: k });
    }
    let next: Vec<f64> = x.iter().zip(g.iter()).map(|(x, g)| x - cfg.step_size * g).collect();
    Ok((
        next,
        StepDiag {
            t: t_mean,
            g_norm: g.norm(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptRow {
    pub k: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub cost: f64,
    /// `-log p` proxy at `x` (NaN without a proxy field).
    pub nlp: f64,
    pub g_norm: f64,
}

/// Iterates `x_0 .. x_K`; row `k` carries the time and gradient norm of the
/// step that left `x_k` (NaN on the last row).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptTrace {
    pub rows: Vec<OptRow>,
}

impl OptTrace {
    pub fn first(&self) -> &OptRow {
        &self.rows[0]
    }

    pub fn last(&self) -> &OptRow {
        self.rows.last().expect("trace has at least one row")
    }
}

fn row<C: CostOracle + ?Sized>(
    k: usize,
    x: &[f64],
    cost: &C,
    proxy: Option<&GridField>,
    lambda: f64,
) -> Result<OptRow> {
    let j = cost.value(&col(x), lambda)?[0];
    let nlp = proxy.map_or(f64::NAN, |p| p.interp([x[0], x.get(1).copied().unwrap_or(0.0)]));
    Ok(OptRow {
        k,
        t: f64::NAN,
        x: x.to_vec(),
        cost: j,
        nlp,
        g_norm: f64::NAN,
    })
}

/// Time-annealed density-gradient optimization (`flow = None` gives the
/// cost-gradient baseline).
pub fn optimize_point<F: VelocityField + ?Sized, C: CostOracle + ?Sized>(
    x0: &[f64],
    cost: &C,
    flow: Option<&F>,
    proxy: Option<&GridField>,
    cfg: &AnnealConfig,
    rng: &mut Rng,
) -> Result<OptTrace> {
    cfg.validate()?;
    let mut rows = vec![row(0, x0, cost, proxy, cfg.lambda)?];
    let mut x = x0.to_vec();
    for k in 0..cfg.iters {
        let (next, d) = density_grad_step(&x, cost, flow, cfg, k, rng)?;
        let last = rows.last_mut().unwrap();
        last.t = d.t;
        last.g_norm = d.g_norm;
        x = next;
        rows.push(row(k + 1, &x, cost, proxy, cfg.lambda)?);
    }
    Ok(OptTrace { rows })
}

pub fn optimize_cost_only<C: CostOracle + ?Sized>(
    x0: &[f64],
    cost: &C,
    proxy: Option<&GridField>,
    cfg: &AnnealConfig,
) -> Result<OptTrace> {
    let mut unused = rng::substream(cfg.seed, "opt/none", 0);
    optimize_point::<crate::flow::ZeroVelocity, C>(x0, cost, None, proxy, cfg, &mut unused)
}

/// Runs every start with its own random sub-stream.
pub fn optimize_many<F: VelocityField + ?Sized, C: CostOracle + ?Sized>(
    starts: &[Vec<f64>],
    cost: &C,
    flow: Option<&F>,
    proxy: Option<&GridField>,
    cfg: &AnnealConfig,
) -> Result<Vec<OptTrace>> {
    starts
        .iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut r = rng::substream(cfg.seed, "opt/start", i as u64);
            optimize_point(x0, cost, flow, proxy, cfg, &mut r)
        })
        .collect()
}

pub fn write_traces_csv(path: &Path, traces: &[OptTrace]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "start,k,t,x,y,cost,nlp,g_norm").map_err(|e| Error::io(path, e))?;
    for (i, tr) in traces.iter().enumerate() {
        for r in &tr.rows {
            writeln!(
                buf,
                "{},{},{},{},{},{},{},{}",
                i,
                r.k,
                r.t,
                r.x[0],
                r.x.get(1).copied().unwrap_or(0.0),
                r.cost,
                r.nlp,
                r.g_norm
            )
            .map_err(|e| Error::io(path, e))?;
        }
    }
    field2d::write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{ConstantCost, QuadraticCost};
    use crate::oracle::GaussianWorld;

    #[test]
    fn ramp_contract() {
        let cfg = AnnealConfig::default();
        cfg.validate().unwrap();
        let ts: Vec<f64> = (0..cfg.iters).map(|k| cfg.t_min(k)).collect();
        assert_eq!(ts[0], 0.02);
        assert!((ts[cfg.iters - 1] - 0.5).abs() < 1e-12);
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
        assert!(AnnealConfig {
            t_max: 0.99,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(AnnealConfig { step_size: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn add_noise_endpoints_and_moments() {
        let mut r = rng::substream(0, "n", 0);
        assert_eq!(add_noise(&[1.5, -2.0], 1.0, &mut r), vec![1.5, -2.0]);
        let mut r1 = rng::substream(0, "n", 1);
        let mut r2 = rng::substream(0, "n", 1);
        let e = add_noise(&[1.5, -2.0], 0.0, &mut r1);
        let mut eps = vec![0.0; 2];
        rng::fill_normal(&mut r2, &mut eps);
        assert_eq!(e, eps);
        let n = 100_000;
        let x = [2.0, -1.0];
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        for _ in 0..n {
            let y = add_noise(&x, 0.5, &mut r);
            for i in 0..2 {
                m[i] += y[i];
                v[i] += (y[i] - 0.5 * x[i]).powi(2);
            }
        }
        for i in 0..2 {
            let mean = m[i] / n as f64;
            let var = v[i] / n as f64;
            assert!((mean - 0.5 * x[i]).abs() < 4.0 * (0.25 / n as f64).sqrt());
            // var of a sample variance of N(0, 0.25): 2 * 0.25^2 / n
            assert!((var - 0.25).abs() < 4.0 * (2.0 * 0.0625 / n as f64).sqrt());
        }
    }

    #[test]
    fn baseline_cases() {
        let cfg = AnnealConfig {
            iters: 50,
            step_size: 0.1,
            lambda: 1.0,
            ..Default::default()
        };
        let q = QuadraticCost {
            a: DMatrix::identity(2, 2) * 2.0,
            c: DVector::zeros(2),
        };
        let tr = optimize_cost_only(&[1.0, -2.0], &q, None, &cfg).unwrap();
        assert_eq!(tr.rows.len(), 51);
        // x <- (1 - 2 eta) x
        for r in &tr.rows {
            let f = 0.8f64.powi(r.k as i32);
            assert!((r.x[0] - f).abs() < 1e-12 && (r.x[1] + 2.0 * f).abs() < 1e-12);
        }
        let c = optimize_cost_only(&[1.0, -2.0], &ConstantCost { dim: 2, value: 3.0 }, None, &cfg).unwrap();
        assert_eq!(c.last().x, vec![1.0, -2.0]);
        let zero = optimize_cost_only(
            &[0.3, 0.1],
            &q,
            None,
            &AnnealConfig {
                iters: 0,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(zero.rows.len(), 1);
        let mut r = rng::substream(0, "x", 0);
        let (a, _) = density_grad_step::<GaussianWorld, _>(&[1.0, -2.0], &q, None, &cfg, 0, &mut r).unwrap();
        assert_eq!(a, tr.rows[1].x);
    }

    #[test]
    fn density_term_pulls_toward_mode_and_is_deterministic() {
        let w = GaussianWorld::standard(2);
        let cfg = AnnealConfig {
            iters: 200,
            step_size: 0.02,
            ..Default::default()
        };
        let zero = ConstantCost { dim: 2, value: 0.0 };
        let starts: Vec<Vec<f64>> = (0..100)
            .map(|i| {
                let a = i as f64 * 0.0628;
                vec![3.0 * a.cos(), 3.0 * a.sin()]
            })
            .collect();
        let tr = optimize_many(&starts, &zero, Some(&w), None, &cfg).unwrap();
        let radii: Vec<f64> = tr
            .iter()
            .map(|t| DVector::from_vec(t.last().x.clone()).norm())
            .collect();
        let mean = radii.iter().sum::<f64>() / 100.0;
        let sd = (radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
        assert!(mean + 4.0 * sd / 10.0 < 3.0, "{mean} {sd}");
        let again = optimize_many(&starts[..3], &zero, Some(&w), None, &cfg).unwrap();
        for (a, b) in again.iter().zip(&tr) {
            assert!(a
                .rows
                .iter()
                .zip(&b.rows)
                .all(|(p, q)| p.x == q.x && p.g_norm.to_bits() == q.g_norm.to_bits()));
        }
        let one = optimize_many(&[vec![3.0, 3.0]], &zero, Some(&w), None, &cfg).unwrap();
        assert!(DVector::from_vec(one[0].last().x.clone()).norm() < 18f64.sqrt());
    }

    #[test]
    fn diverging_step_is_reported() {
        struct Nan;
        impl CostOracle for Nan {
            fn dim(&self) -> usize {
                2
            }
            fn value(&self, x: &DMatrix<f64>, _l: f64) -> Result<Vec<f64>> {
                Ok(vec![0.0; x.ncols()])
            }
            fn value_grad(&self, x: &DMatrix<f64>, _l: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
                Ok((vec![0.0; x.ncols()], DMatrix::from_element(2, x.ncols(), f64::NAN)))
            }
        }
        let err = optimize_cost_only(&[0.0, 0.0], &Nan, None, &AnnealConfig::default()).unwrap_err();
        assert!(matches!(err, Error::OptimizerDiverged { iteration: 0 }));
    }
}
