//! Cost oracles and λ-conditioned cost predictors.
//!
//! A predictor is parametrized as `J_theta(x, λ) = λ * f(x, emb(ln λ))`, so
//! the network output stays on the scale of the cost field for every λ.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field2d::{self, Geometry, GridField, GridPmf};
use crate::net::{self, Activation, DifferentiableNet, ScalarEmbedding, TrainState};
use crate::rng::{self, Rng};

/// `J(x, λ)` with an input-gradient query; batches have one column per point.
pub trait CostOracle: Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &DMatrix<f64>, lambda: f64) -> Result<Vec<f64>>;

    /// Values and gradients (`dim x n`).
    fn value_grad(&self, x: &DMatrix<f64>, lambda: f64) -> Result<(Vec<f64>, DMatrix<f64>)>;
}

/// Ground truth `J(x, λ) = λ * bilinear(C, x)`.
#[derive(Debug, Clone)]
pub struct GridCost {
    pub field: GridField,
}

impl CostOracle for GridCost {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, x: &DMatrix<f64>, lambda: f64) -> Result<Vec<f64>> {
        Ok(x.column_iter()
            .map(|c| lambda * self.field.interp([c[0], c[1]]))
            .collect())
    }

    fn value_grad(&self, x: &DMatrix<f64>, lambda: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let mut g = DMatrix::zeros(2, x.ncols());
        let mut vals = Vec::with_capacity(x.ncols());
        for (j, c) in x.column_iter().enumerate() {
            let p = [c[0], c[1]];
            vals.push(lambda * self.field.interp(p));
            let gr = self.field.interp_grad(p);
            g[(0, j)] = lambda * gr[0];
            g[(1, j)] = lambda * gr[1];
        }
        Ok((vals, g))
    }
}

/// `J(x, λ) = λ/2 (x - c)^T A (x - c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl CostOracle for QuadraticCost {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn value(&self, x: &DMatrix<f64>, lambda: f64) -> Result<Vec<f64>> {
        Ok(x.column_iter()
            .map(|col| {
                let r = col - &self.c;
                0.5 * lambda * r.dot(&(&self.a * &r))
            })
            .collect())
    }

    fn value_grad(&self, x: &DMatrix<f64>, lambda: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let mut r = x.clone();
        for mut col in r.column_iter_mut() {
            col -= &self.c;
        }
        let ar = &self.a * &r;
        let vals = r
            .column_iter()
            .zip(ar.column_iter())
            .map(|(r, a)| 0.5 * lambda * r.dot(&a))
            .collect();
        Ok((vals, ar * lambda))
    }
}

/// `J(x, λ) = λ * value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantCost {
    pub dim: usize,
    pub value: f64,
}

impl CostOracle for ConstantCost {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &DMatrix<f64>, lambda: f64) -> Result<Vec<f64>> {
        Ok(vec![lambda * self.value; x.ncols()])
    }
    fn value_grad(&self, x: &DMatrix<f64>, lambda: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
        Ok((self.value(x, lambda)?, DMatrix::zeros(x.nrows(), x.ncols())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostPredictor {
    pub net: DifferentiableNet,
    pub embed: ScalarEmbedding,
    pub lambda_range: [f64; 2],
}

impl CostPredictor {
    pub fn new(hidden: &[usize], lambda_range: [f64; 2], rng: &mut Rng) -> Result<Self> {
        if !(0.0 < lambda_range[0] && lambda_range[0] <= lambda_range[1]) {
            return Err(Error::InvalidArgument("bad lambda_range".into()));
        }
        let embed = ScalarEmbedding::new(4, 0.5);
        let mut widths = vec![2 + embed.dim()];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Ok(Self {
            net: DifferentiableNet::new(&widths, Activation::Tanh, rng)?,
            embed,
            lambda_range,
        })
    }

    fn inputs(&self, x: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
        let e = self.embed.embed(lambda.max(1e-300).ln());
        DMatrix::from_fn(2 + e.len(), x.ncols(), |i, j| if i < 2 { x[(i, j)] } else { e[i - 2] })
    }

    /// Values `J_theta(x_j, λ)` and the parameter gradient of
    /// `sum_j cot_j * J_theta(x_j, λ)`.
    pub fn value_param_grad(&self, x: &DMatrix<f64>, lambda: f64, cot: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let cache = self.net.forward_cached(&self.inputs(x, lambda))?;
        let vals = cache.output().iter().map(|f| lambda * f).collect();
        let c = DMatrix::from_fn(1, x.ncols(), |_, j| lambda * cot[j]);
        let (_, g) = self.net.backward(&cache, &c, true)?;
        Ok((vals, g.unwrap()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.net.save(
            path,
            &[
                self.lambda_range[0],
                self.lambda_range[1],
                self.embed.n_freq as f64,
                self.embed.base,
            ],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, extra) = DifferentiableNet::load(path)?;
        if extra.len() != 4 || net.d_out() != 1 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "cost checkpoint header".into(),
            });
        }
        Ok(Self {
            net,
            lambda_range: [extra[0], extra[1]],
            embed: ScalarEmbedding::new(extra[2] as usize, extra[3]),
        })
    }
}

impl CostOracle for CostPredictor {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, x: &DMatrix<f64>, lambda: f64) -> Result<Vec<f64>> {
        let out = self.net.forward_batch(&self.inputs(x, lambda))?;
        Ok(out.iter().map(|f| lambda * f).collect())
    }

    fn value_grad(&self, x: &DMatrix<f64>, lambda: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let cache = self.net.forward_cached(&self.inputs(x, lambda))?;
        let vals = cache.output().iter().map(|f| lambda * f).collect();
        let cot = DMatrix::from_element(1, x.ncols(), lambda);
        let (g, _) = self.net.backward(&cache, &cot, false)?;
        Ok((vals, g.rows(0, 2).into_owned()))
    }
}

/// `|B| * softmax(-values)`, computed with max subtraction.
pub fn batch_weights(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = values.iter().map(|v| (min - v).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| n * v / z).collect()
}

/// Minibatch SKL loss on raw predictions `pred = J_theta(x, λ)` and targets
/// `target = λ J(x)`; returns the loss and `dL/dpred`.
///
/// With `stop_grad` the predictor weights are treated as constants.
pub fn skl_loss_values(pred: &[f64], target: &[f64], stop_grad: bool) -> Result<(f64, Vec<f64>)> {
    let n = pred.len();
    if n < 2 || target.len() != n {
        return Err(Error::DegenerateBatch);
    }
    let wj = batch_weights(target);
    let wt = batch_weights(pred);
    let nf = n as f64;
    let d: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let loss = d
        .iter()
        .zip(wj.iter().zip(&wt))
        .map(|(d, (a, b))| d * (a - b))
        .sum::<f64>()
        / nf;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let sm: Vec<f64> = wt.iter().map(|w| w / nf).collect();
    let dbar: f64 = sm.iter().zip(&d).map(|(s, d)| s * d).sum();
    let grad = (0..n)
        .map(|j| {
            let first = (wj[j] - wt[j]) / nf;
            if stop_grad {
                first
            } else {
                first + sm[j] * (d[j] - dbar)
            }
        })
        .collect();
    Ok((loss, grad))
}

/// Mean squared error and its gradient.
pub fn mse_loss_values(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = pred.len();
    if n == 0 || target.len() != n {
        return Err(Error::DegenerateBatch);
    }
    let nf = n as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / nf;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((loss, pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / nf).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Skl,
    Mse,
}

/// Loss and parameter gradient on a batch with true costs `costs = J(x)`.
pub fn loss_batch(
    model: &CostPredictor,
    x: &DMatrix<f64>,
    costs: &[f64],
    lambda: f64,
    kind: LossKind,
    stop_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let pred = model.value(x, lambda)?;
    let target: Vec<f64> = costs.iter().map(|c| lambda * c).collect();
    let (loss, dl) = match kind {
        LossKind::Skl => skl_loss_values(&pred, &target, stop_grad)?,
        LossKind::Mse => mse_loss_values(&pred, &target)?,
    };
    let (_, g) = model.value_param_grad(x, lambda, &dl)?;
    Ok((loss, g))
}

pub fn skl_loss_batch(model: &CostPredictor, x: &DMatrix<f64>, costs: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    loss_batch(model, x, costs, lambda, LossKind::Skl, false)
}

pub fn mse_loss_batch(model: &CostPredictor, x: &DMatrix<f64>, costs: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    loss_batch(model, x, costs, lambda, LossKind::Mse, false)
}

fn centers_matrix(geom: &Geometry) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(2, geom.len());
    for (i, x, y) in geom.centers() {
        m[(0, i)] = x;
        m[(1, i)] = y;
    }
    m
}

/// `q ∝ p * exp(-J(x, λ))` with `J` evaluated at the cell centres of `p`.
pub fn model_tilted_pmf<C: CostOracle + ?Sized>(model: &C, p: &GridPmf, lambda: f64) -> Result<GridPmf> {
    let mut vals = Vec::with_capacity(p.geom.len());
    let centers = centers_matrix(&p.geom);
    for start in (0..p.geom.len()).step_by(4096) {
        let n = (p.geom.len() - start).min(4096);
        vals.extend(model.value(&centers.columns(start, n).into_owned(), lambda)?);
    }
    field2d::tilt_values(p, &vals, 1.0)
}

/// Re-grids a pmf by bilinear interpolation of its density.
pub fn resample_pmf(p: &GridPmf, geom: Geometry) -> Result<GridPmf> {
    if p.geom == geom {
        return Ok(p.clone());
    }
    let dens = GridField::new(p.geom, p.mass.iter().map(|m| m / p.geom.cell_area()).collect())?;
    let w = dens.resample(geom)?;
    GridPmf::from_weights(geom, w.values.iter().map(|v| v.max(0.0)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostTrainConfig {
    pub seed: u64,
    pub loss: LossKind,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda_range: [f64; 2],
    pub eval_lambdas: Vec<f64>,
    pub eval_interval: usize,
    pub eval_grid: usize,
    pub stop_grad: bool,
}

impl Default for CostTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            loss: LossKind::Skl,
            hidden: vec![64, 64, 64],
            steps: 2000,
            batch: 256,
            lr: 2e-3,
            lambda_range: [0.1, 100.0],
            eval_lambdas: vec![1.0, 10.0, 100.0],
            eval_interval: 200,
            eval_grid: 250,
            stop_grad: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub lambda: f64,
    pub kl_q_qhat: f64,
    pub kl_qhat_q: f64,
    pub skl: f64,
}

#[derive(Debug, Clone)]
pub struct CostTrainResult {
    pub best: CostPredictor,
    pub last: CostPredictor,
    pub history: Vec<MetricRow>,
    /// Step of the checkpoint with the lowest mean SKL.
    pub best_step: usize,
    pub best_mean_skl: f64,
}

/// Trains with λ drawn log-uniformly from `lambda_range` per step and keeps
/// the checkpoint with the lowest mean grid SKL over `eval_lambdas`.
pub fn train_cost(
    model: CostPredictor,
    p: &GridPmf,
    cost: &GridField,
    cfg: &CostTrainConfig,
) -> Result<CostTrainResult> {
    if p.geom != cost.geom {
        return Err(Error::GeometryMismatch);
    }
    if cfg.eval_interval == 0 || cfg.eval_lambdas.is_empty() {
        return Err(Error::InvalidArgument("eval_interval and eval_lambdas required".into()));
    }
    let eval_geom = Geometry {
        nx: cfg.eval_grid,
        ny: cfg.eval_grid,
        ..p.geom
    };
    let p_eval = resample_pmf(p, eval_geom)?;
    let c_eval = cost.resample(eval_geom)?;
    let targets: Vec<GridPmf> = cfg
        .eval_lambdas
        .iter()
        .map(|l| field2d::tilt(&p_eval, &c_eval, *l))
        .collect::<Result<_>>()?;

    let mut model = model;
    let mut state = TrainState::new(model.net.n_params(), cfg.lr);
    let mut data_rng = rng::substream(cfg.seed, "cost/data", 0);
    let mut lam_rng = rng::substream(cfg.seed, "cost/lambda", 0);
    let (ll, lh) = (cfg.lambda_range[0].ln(), cfg.lambda_range[1].ln());
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.clone());

    let evaluate = |model: &CostPredictor, step: usize, history: &mut Vec<MetricRow>| -> Result<f64> {
        let mut acc = 0.0;
        for (lam, q) in cfg.eval_lambdas.iter().zip(&targets) {
            let qh = model_tilted_pmf(model, &p_eval, *lam)?;
            let a = field2d::kl(q, &qh)?;
            let b = field2d::kl(&qh, q)?;
            let row = MetricRow {
                step,
                lambda: *lam,
                kl_q_qhat: a,
                kl_qhat_q: b,
                skl: 0.5 * (a + b),
            };
            acc += row.skl;
            history.push(row);
        }
        Ok(acc / cfg.eval_lambdas.len() as f64)
    };

    for step in 0..=cfg.steps {
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let m = evaluate(&model, step, &mut history)?;
            if m < best.0 {
                best = (m, step, model.clone());
            }
        }
        if step == cfg.steps {
            break;
        }
        let lambda = if lh > ll { lam_rng.gen_range(ll..lh) } else { ll }.exp();
        let pts = field2d::sample(p, cfg.batch, &mut data_rng);
        let x = DMatrix::from_fn(2, pts.len(), |i, j| pts[j][i]);
        let costs: Vec<f64> = pts.iter().map(|q| cost.interp(*q)).collect();
        let (_, g) = loss_batch(&model, &x, &costs, lambda, cfg.loss, cfg.stop_grad)?;
        net::train_step(&mut model.net, &mut state, &g)?;
    }
    Ok(CostTrainResult {
        best: best.2,
        last: model,
        history,
        best_step: best.1,
        best_mean_skl: best.0,
    })
}

pub fn write_history_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "step,lambda_eval,kl_q_qhat,kl_qhat_q,skl").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(buf, "{},{},{},{},{}", r.step, r.lambda, r.kl_q_qhat, r.kl_qhat_q, r.skl)
            .map_err(|e| Error::io(path, e))?;
    }
    field2d::write_atomic(path, &buf)
}
