//! Independent ground truth for verification: an analytic Gaussian world,
//! finite-difference Jacobians, dense secant recursions, dense square roots,
//! Gauss–Hermite guidance and bound checkers.
//!
//! Everything here is dense and meant for small dimensions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::costmodel::CostOracle;
use crate::error::{Error, Result};
use crate::field2d::{self, GridPmf};
use crate::flow::VelocityField;
use crate::schedule::Schedule;
use crate::secant::SecantPair;

/// Data law `p = N(mean, S)` pushed through the rectified-linear path.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWorld {
    pub mean: DVector<f64>,
    pub s: DMatrix<f64>,
}

impl GaussianWorld {
    pub fn new(mean: [f64; 2], s: [[f64; 2]; 2]) -> Result<Self> {
        Self::from_parts(
            DVector::from_column_slice(&mean),
            DMatrix::from_row_slice(2, 2, &[s[0][0], s[0][1], s[1][0], s[1][1]]),
        )
    }

    pub fn from_parts(mean: DVector<f64>, s: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if s.shape() != (d, d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.nrows(),
            });
        }
        if (&s - s.transpose()).norm() > 1e-12 * s.norm() || s.clone().cholesky().is_none() {
            return Err(Error::CovarianceNotSpd);
        }
        Ok(Self { mean, s })
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mean: DVector::zeros(d),
            s: DMatrix::identity(d, d),
        }
    }

    fn d(&self) -> usize {
        self.mean.len()
    }

    /// `t^2 S + (1-t)^2 I`, the covariance of `x_t`.
    pub fn marginal_cov(&self, t: f64) -> DMatrix<f64> {
        &self.s * (t * t) + DMatrix::identity(self.d(), self.d()) * ((1.0 - t) * (1.0 - t))
    }

    fn marginal_inv(&self, t: f64) -> DMatrix<f64> {
        self.marginal_cov(t)
            .cholesky()
            .expect("marginal covariance is SPD")
            .inverse()
    }

    /// `d E[x1 | x_t] / d x_t = t S M^{-1}`.
    pub fn posterior_jacobian(&self, t: f64) -> DMatrix<f64> {
        &self.s * self.marginal_inv(t) * t
    }

    /// Mean and covariance of `x1 | x_t`.
    pub fn analytic_posterior(&self, x: &DVector<f64>, t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let minv = self.marginal_inv(t);
        let mean = &self.mean + &self.s * (&minv * (x - &self.mean * t)) * t;
        let c = &self.s * &minv * ((1.0 - t) * (1.0 - t));
        (mean, (&c + c.transpose()) * 0.5)
    }

    pub fn analytic_velocity(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let (mu, _) = self.analytic_posterior(x, t);
        (mu - x) / (1.0 - t)
    }

    /// `grad log p_t(x) = -M^{-1} (x - t mean)`.
    pub fn analytic_score(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        -(self.marginal_inv(t) * (x - &self.mean * t))
    }

    fn velocity_jacobian(&self, t: f64) -> DMatrix<f64> {
        let d = self.d();
        (self.posterior_jacobian(t) - DMatrix::identity(d, d)) / (1.0 - t)
    }
}

impl VelocityField for GaussianWorld {
    fn dim(&self) -> usize {
        self.d()
    }

    fn velocity(&self, x: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
        if x.nrows() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: x.nrows(),
            });
        }
        let minv = self.marginal_inv(t);
        let k = &self.s * minv * t;
        let mut shifted = x.clone();
        let tm = &self.mean * t;
        for mut c in shifted.column_iter_mut() {
            c -= &tm;
        }
        let mut mu = k * shifted;
        for mut c in mu.column_iter_mut() {
            c += &self.mean;
        }
        Ok((mu - x) / (1.0 - t))
    }

    fn vjp(&self, x: &DMatrix<f64>, t: f64, cot: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: x.nrows(),
            });
        }
        Ok(self.velocity_jacobian(t).transpose() * cot)
    }
}

/// Central-difference Jacobian, one column per input coordinate.
pub fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let m = f(x).len();
    let mut j = DMatrix::zeros(m, x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        j.set_column(i, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    j
}

/// Literal `B <- u (V^T B V + rho y y^T) + w I` with `V = I - rho s y^T`.
pub fn dense_b_recursion(pairs: &[SecantPair], gamma0: f64, dim: usize) -> Result<DMatrix<f64>> {
    let eye = DMatrix::<f64>::identity(dim, dim);
    let mut b = &eye * gamma0;
    for p in pairs {
        let sy = p.y_hat.dot(&p.s);
        if !(sy > 0.0) {
            return Err(Error::CurvatureViolated);
        }
        let rho = 1.0 / sy;
        let v = &eye - &p.s * p.y_hat.transpose() * rho;
        b = (v.transpose() * &b * &v + &p.y_hat * p.y_hat.transpose() * rho) * p.u + &eye * p.w;
    }
    Ok(b)
}

/// Symmetric square root by eigendecomposition.
pub fn dense_sqrt(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new((b + b.transpose()) * 0.5);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10) {
        return Err(Error::CovarianceNotSpd);
    }
    let sq = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sq) * eig.eigenvectors.transpose())
}

/// Spectral norm.
pub fn norm2(a: &DMatrix<f64>) -> f64 {
    a.clone().singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Gauss–Hermite rule for `E[f(e)]`, `e ~ N(0, 1)` (weights sum to 1),
/// from the eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jm = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jm[(k - 1, k)] = b;
        jm[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jm);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetrize against eigen-solver round-off
    let (mut x, mut w): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let xs = 0.5 * (x[j] - x[i]);
        let ws = 0.5 * (w[i] + w[j]);
        x[i] = -xs;
        x[j] = xs;
        w[i] = ws;
        w[j] = ws;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let tot: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= tot);
    (x, w)
}

/// Tilted moments of `z ~ N(0, Sigma)` under `exp(-J(mu + z, λ))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TiltedMoments {
    /// `E_tilted[z]`.
    pub mean: Vec<f64>,
    /// `E_tilted[|z|^2]`.
    pub second_moment: f64,
}

/// Tensor-product Gauss–Hermite tilted moments (`order` nodes per axis).
pub fn tilted_moments_quadrature<C: CostOracle + ?Sized>(
    cost: &C,
    lambda: f64,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    order: usize,
) -> Result<TiltedMoments> {
    let d = mu.len();
    if d > 3 {
        return Err(Error::InvalidArgument("quadrature supports d <= 3".into()));
    }
    let l = sigma.clone().cholesky().ok_or(Error::CovarianceNotSpd)?.l();
    let (nodes, weights) = gauss_hermite(order);
    let total = order.pow(d as u32);
    let mut eps = DMatrix::zeros(d, total);
    let mut lw = vec![0.0; total];
    for k in 0..total {
        let mut r = k;
        let mut logw = 0.0;
        for i in 0..d {
            let idx = r % order;
            r /= order;
            eps[(i, k)] = nodes[idx];
            logw += weights[idx].ln();
        }
        lw[k] = logw;
    }
    let z = &l * eps;
    let mut x1 = z.clone();
    for mut c in x1.column_iter_mut() {
        c += mu;
    }
    let j = cost.value(&x1, lambda)?;
    let ell: Vec<f64> = lw.iter().zip(&j).map(|(w, j)| w - j).collect();
    let lmax = ell.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lmax.is_finite() {
        return Err(Error::CostOverflow);
    }
    let mut zsum = 0.0;
    let mut m = DVector::zeros(d);
    let mut m2 = 0.0;
    for (k, l) in ell.iter().enumerate() {
        let w = (l - lmax).exp();
        zsum += w;
        m.axpy(w, &z.column(k), 1.0);
        m2 += w * z.column(k).norm_squared();
    }
    Ok(TiltedMoments {
        mean: (m / zsum).iter().copied().collect(),
        second_moment: m2 / zsum,
    })
}

/// Closed form for `J = λ/2 (x - c)^T A (x - c)`: the tilted law of `x1` is
/// Gaussian with precision `Sigma^{-1} + λ A`.
pub fn tilted_moments_quadratic(
    a: &DMatrix<f64>,
    c: &DVector<f64>,
    lambda: f64,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<TiltedMoments> {
    let sinv = sigma.clone().cholesky().ok_or(Error::CovarianceNotSpd)?.inverse();
    let prec = &sinv + a * lambda;
    let cov = prec.cholesky().ok_or(Error::CovarianceNotSpd)?.inverse();
    let mean = &cov * (&sinv * mu + a * c * lambda);
    let shift = mean - mu;
    Ok(TiltedMoments {
        second_moment: cov.trace() + shift.norm_squared(),
        mean: shift.iter().copied().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadratureGuidance {
    pub g_lgd: Vec<f64>,
    pub g_sim: Vec<f64>,
    pub moments: TiltedMoments,
}

/// Exact LGD and SIM guidance for the Gaussian proposal `N(mu, Sigma)`:
/// `g_LGD = s_t B^T Sigma^{-1} E_tilted[z]` and `g_SIM = b_t E_tilted[z]`,
/// where `B` is the posterior-mean Jacobian.
#[allow(clippy::too_many_arguments)]
pub fn quadrature_guidance<C: CostOracle + ?Sized>(
    cost: &C,
    lambda: f64,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    jac: &DMatrix<f64>,
    sched: &Schedule,
    t: f64,
    order: usize,
) -> Result<QuadratureGuidance> {
    if order < 20 {
        return Err(Error::InvalidArgument("quadrature order must be >= 20".into()));
    }
    let m = tilted_moments_quadrature(cost, lambda, mu, sigma, order)?;
    let ez = DVector::from_column_slice(&m.mean);
    let c = sched.coeffs(t);
    let sinv = sigma.clone().cholesky().ok_or(Error::CovarianceNotSpd)?.inverse();
    let g_lgd = jac.transpose() * (sinv * &ez) * c.s;
    let g_sim = ez * c.b;
    Ok(QuadratureGuidance {
        g_lgd: g_lgd.iter().copied().collect(),
        g_sim: g_sim.iter().copied().collect(),
        moments: m,
    })
}

/// `|g_LGD - g_SIM|^2 <= b^2 |Sigma^{-1}|^2 E_tilted|z|^2 e_t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub bound: f64,
    pub e_t: f64,
    pub pass: bool,
}

impl BoundReport {
    /// `bound / lhs`; infinite when both sides vanish.
    pub fn slack(&self) -> f64 {
        if self.lhs == 0.0 {
            f64::INFINITY
        } else {
            self.bound / self.lhs
        }
    }
}

/// LGD/SIM gap bound in the Gaussian world at `(x_t, t)` with proposal
/// covariance `sigma_prop`, evaluated by quadrature and the analytic Jacobian.
pub fn check_theorem2<C: CostOracle + ?Sized>(
    world: &GaussianWorld,
    cost: &C,
    lambda: f64,
    x_t: &DVector<f64>,
    t: f64,
    sigma_prop: &DMatrix<f64>,
    order: usize,
) -> Result<BoundReport> {
    let sched = Schedule::default();
    let (mu, _) = world.analytic_posterior(x_t, t);
    let jac = world.posterior_jacobian(t);
    let q = quadrature_guidance(cost, lambda, &mu, sigma_prop, &jac, &sched, t, order)?;
    let c = sched.coeffs(t);
    let gap = DVector::from_vec(q.g_lgd.clone()) - DVector::from_vec(q.g_sim.clone());
    let lhs = gap.norm_squared();
    let delta = sigma_prop - &jac * (c.sigma * c.sigma / c.alpha);
    let e_t = norm2(&delta).powi(2);
    let sinv = sigma_prop.clone().cholesky().ok_or(Error::CovarianceNotSpd)?.inverse();
    let bound = c.b * c.b * norm2(&sinv).powi(2) * q.moments.second_moment * e_t;
    Ok(BoundReport {
        lhs,
        bound,
        e_t,
        pass: lhs <= bound * (1.0 + 1e-6),
    })
}

/// Grid-exact small-λ quantities for `J_theta = J + delta` under the scaled
/// costs `λ J` and `λ J_theta`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SklReport {
    pub lambda: f64,
    /// `KL(q | q_theta) + KL(q_theta | q)`.
    pub skl: f64,
    /// `E_p[λ(J_theta - J)(w^J - w^theta)]`; equals `skl`.
    pub skl_weighted: f64,
    pub var: f64,
    /// `skl / (λ^2 Var_p(J_theta - J))`.
    pub ratio: f64,
    pub mse: f64,
    pub exp: f64,
    pub cs_ok: bool,
}

fn normalized_weights(p: &GridPmf, j: &[f64], lambda: f64) -> Vec<f64> {
    let jmin = j.iter().cloned().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = j.iter().map(|v| (-lambda * (v - jmin)).exp()).collect();
    let z: f64 = p.mass.iter().zip(&e).map(|(p, e)| p * e).sum();
    e.into_iter().map(|e| e / z).collect()
}

pub fn check_skl_small_lambda(p: &GridPmf, j: &[f64], j_theta: &[f64], lambda: f64) -> Result<SklReport> {
    let n = p.mass.len();
    if j.len() != n || j_theta.len() != n {
        return Err(Error::GeometryMismatch);
    }
    let q = field2d::tilt_values(p, j, lambda)?;
    let qt = field2d::tilt_values(p, j_theta, lambda)?;
    let skl = field2d::kl(&q, &qt)? + field2d::kl(&qt, &q)?;
    let wj = normalized_weights(p, j, lambda);
    let wt = normalized_weights(p, j_theta, lambda);
    let (mut m1, mut m2, mut sw, mut mse, mut exp) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let d = j_theta[i] - j[i];
        let pi = p.mass[i];
        m1 += pi * d;
        m2 += pi * d * d;
        sw += pi * lambda * d * (wj[i] - wt[i]);
        mse += pi * (lambda * d).powi(2);
        exp += pi * (wt[i] - wj[i]).powi(2);
    }
    let var = m2 - m1 * m1;
    Ok(SklReport {
        lambda,
        skl,
        skl_weighted: sw,
        var,
        ratio: skl / (lambda * lambda * var),
        mse,
        exp,
        cs_ok: sw <= (mse * exp).sqrt() * (1.0 + 1e-9),
    })
}
