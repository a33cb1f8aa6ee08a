//! Conditional flow matching and ODE sampling.
//!
//! The integrator is shared with guided generation: a [`StepGuidance`]
//! supplies the additive drift term per step, and [`NoGuidance`] gives the
//! plain sampler.

use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field2d::{self, GridPmf};
use crate::guide::GuidanceDiag;
use crate::net::{self, Activation, DifferentiableNet, ScalarEmbedding, TrainState};
use crate::rng::{self, Rng};
use crate::schedule::Schedule;

/// A time-dependent vector field evaluated on batches (one column per point).
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    fn velocity(&self, x: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>>;

    /// Column-wise `cot^T dv/dx`.
    fn vjp(&self, x: &DMatrix<f64>, t: f64, cot: &DMatrix<f64>) -> Result<DMatrix<f64>>;

    fn schedule(&self) -> Schedule {
        Schedule::default()
    }
}

/// `v = 0` in `dim` dimensions.
#[derive(Debug, Clone, Copy)]
pub struct ZeroVelocity(pub usize);

impl VelocityField for ZeroVelocity {
    fn dim(&self) -> usize {
        self.0
    }
    fn velocity(&self, x: &DMatrix<f64>, _t: f64) -> Result<DMatrix<f64>> {
        Ok(DMatrix::zeros(x.nrows(), x.ncols()))
    }
    fn vjp(&self, x: &DMatrix<f64>, _t: f64, _cot: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(DMatrix::zeros(x.nrows(), x.ncols()))
    }
}

/// Learned velocity `v_theta(x, t)` with the time embedded into the input.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    pub net: DifferentiableNet,
    pub sched: Schedule,
    pub embed: ScalarEmbedding,
}

impl VelocityModel {
    /// `d -> hidden... -> d` tanh net with a zeroed output layer.
    pub fn new(dim: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let embed = ScalarEmbedding::new(4, 1.0);
        let mut widths = vec![dim + embed.dim()];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let mut net = DifferentiableNet::new(&widths, Activation::Tanh, rng)?;
        net.zero_last_layer();
        Ok(Self {
            net,
            sched: Schedule::default(),
            embed,
        })
    }

    fn inputs(&self, x: &DMatrix<f64>, t: &[f64]) -> DMatrix<f64> {
        let d = x.nrows();
        let e = self.embed.dim();
        let mut inp = DMatrix::zeros(d + e, x.ncols());
        let mut buf = vec![0.0; e];
        for j in 0..x.ncols() {
            let tj = if t.len() == 1 { t[0] } else { t[j] };
            self.embed.embed_into(tj, &mut buf);
            let mut col = inp.column_mut(j);
            for i in 0..d {
                col[i] = x[(i, j)];
            }
            for i in 0..e {
                col[d + i] = buf[i];
            }
        }
        inp
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.net
            .save(path, &[self.embed.n_freq as f64, self.embed.base, self.sched.eps_t])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, extra) = DifferentiableNet::load(path)?;
        let bad = || Error::Format {
            path: path.to_path_buf(),
            reason: "velocity checkpoint header".into(),
        };
        if extra.len() != 3 {
            return Err(bad());
        }
        let embed = ScalarEmbedding::new(extra[0] as usize, extra[1]);
        if net.d_in() != net.d_out() + embed.dim() {
            return Err(bad());
        }
        Ok(Self {
            net,
            sched: Schedule {
                eps_t: extra[2],
                ..Schedule::default()
            },
            embed,
        })
    }
}

impl VelocityField for VelocityModel {
    fn dim(&self) -> usize {
        self.net.d_out()
    }

    fn velocity(&self, x: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
        self.net.forward_batch(&self.inputs(x, &[t]))
    }

    fn vjp(&self, x: &DMatrix<f64>, t: f64, cot: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let cache = self.net.forward_cached(&self.inputs(x, &[t]))?;
        let (g, _) = self.net.backward(&cache, cot, false)?;
        Ok(g.rows(0, x.nrows()).into_owned())
    }

    fn schedule(&self) -> Schedule {
        self.sched
    }
}

/// Regression inputs for one CFM batch: `(x_t, t, x1 - x0)`.
pub fn cfm_targets(x1: &DMatrix<f64>, rng: &mut Rng) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (d, n) = x1.shape();
    let mut xt = DMatrix::zeros(d, n);
    let mut target = DMatrix::zeros(d, n);
    let mut ts = Vec::with_capacity(n);
    let mut x0 = vec![0.0; d];
    for j in 0..n {
        let t: f64 = rng.gen();
        rng::fill_normal(rng, &mut x0);
        for i in 0..d {
            xt[(i, j)] = t * x1[(i, j)] + (1.0 - t) * x0[i];
            target[(i, j)] = x1[(i, j)] - x0[i];
        }
        ts.push(t);
    }
    (xt, ts, target)
}

/// Mean over the batch of `|v_theta(x_t, t) - (x1 - x0)|^2`, with its exact
/// parameter gradient.
pub fn cfm_loss_batch(model: &VelocityModel, x1: &DMatrix<f64>, rng: &mut Rng) -> Result<(f64, Vec<f64>)> {
    if x1.ncols() == 0 {
        return Err(Error::DegenerateBatch);
    }
    let (xt, ts, target) = cfm_targets(x1, rng);
    let cache = model.net.forward_cached(&model.inputs(&xt, &ts))?;
    let resid = cache.output() - &target;
    let n = x1.ncols() as f64;
    let loss = resid.norm_squared() / n;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let cot = resid * (2.0 / n);
    let (_, grads) = model.net.backward(&cache, &cot, true)?;
    Ok((loss, grads.unwrap()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate at the last step, reached by cosine decay.
    pub lr_final: f64,
    /// Number of steps averaged into one history entry.
    pub log_every: usize,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            hidden: vec![64, 64, 64],
            steps: 3000,
            batch: 256,
            lr: 3e-3,
            lr_final: 1e-4,
            log_every: 100,
        }
    }
}

fn points_matrix(points: &[[f64; 2]]) -> DMatrix<f64> {
    DMatrix::from_fn(2, points.len(), |i, j| points[j][i])
}

/// Trains on samples of `p`; returns the per-interval mean loss history.
pub fn train_flow(model: &mut VelocityModel, p: &GridPmf, cfg: &FlowTrainConfig) -> Result<Vec<f64>> {
    if cfg.batch == 0 || cfg.log_every == 0 {
        return Err(Error::InvalidArgument("batch and log_every must be >= 1".into()));
    }
    let mut data_rng = rng::substream(cfg.seed, "flow/data", 0);
    let mut noise_rng = rng::substream(cfg.seed, "flow/noise", 0);
    let mut state = TrainState::new(model.net.n_params(), cfg.lr);
    let mut history = Vec::new();
    let mut acc = 0.0;
    let mut cnt = 0;
    for step in 0..cfg.steps {
        let frac = step as f64 / cfg.steps.max(1) as f64;
        state.lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + (std::f64::consts::PI * frac).cos());
        let x1 = points_matrix(&field2d::sample(p, cfg.batch, &mut data_rng));
        let (loss, grads) = cfm_loss_batch(model, &x1, &mut noise_rng)?;
        net::train_step(&mut model.net, &mut state, &grads)?;
        acc += loss;
        cnt += 1;
        if cnt == cfg.log_every || step + 1 == cfg.steps {
            history.push(acc / cnt as f64);
            acc = 0.0;
            cnt = 0;
        }
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    Euler,
    Midpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdeConfig {
    pub n_steps: usize,
    pub integrator: Integrator,
    pub t_start: f64,
    pub t_end: f64,
    /// Replace the remaining interval `[t_end, 1]` by the one-step jump
    /// `x + (1 - t_end) v`.
    pub terminal_clamp: bool,
    /// Trajectories integrated together in one batch.
    pub chunk: usize,
    /// Record traces for this many leading trajectories.
    pub n_trace: usize,
    /// 0 or 1 runs serially; more fans chunks out over a thread pool.
    pub threads: usize,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            n_steps: 100,
            integrator: Integrator::Euler,
            t_start: 0.0,
            t_end: 0.98,
            terminal_clamp: true,
            chunk: 1024,
            n_trace: 0,
            threads: 0,
        }
    }
}

impl OdeConfig {
    pub fn times(&self) -> Vec<f64> {
        let k = self.n_steps as f64;
        (0..=self.n_steps)
            .map(|i| self.t_start + (self.t_end - self.t_start) * (i as f64 / k))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.chunk == 0 {
            return Err(Error::InvalidArgument("n_steps and chunk must be >= 1".into()));
        }
        if !(0.0 <= self.t_start && self.t_start < self.t_end && self.t_end < 1.0) {
            return Err(Error::InvalidArgument("need 0 <= t_start < t_end < 1".into()));
        }
        Ok(())
    }
}

/// One integrator step of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStep {
    pub step: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub g: Vec<f64>,
    pub diag: GuidanceDiag,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplerTrace {
    pub traj: usize,
    pub steps: Vec<TraceStep>,
    /// State after the last step (before any terminal clamp).
    pub x_end: Vec<f64>,
}

/// Additive drift supplied to the integrator.
pub trait StepGuidance: Sync {
    type State: Send;

    fn init_state(&self, traj: usize) -> Self::State;

    /// Guidance for the columns of `x` (trajectories whose states are
    /// `states`, in order) at grid step `k`.
    fn guidance(
        &self,
        states: &mut [Self::State],
        x: &DMatrix<f64>,
        v: &DMatrix<f64>,
        k: usize,
        t: f64,
        t_next: f64,
    ) -> Result<(DMatrix<f64>, Vec<GuidanceDiag>)>;
}

pub struct NoGuidance;

impl StepGuidance for NoGuidance {
    type State = ();

    fn init_state(&self, _traj: usize) {}

    fn guidance(
        &self,
        _states: &mut [()],
        x: &DMatrix<f64>,
        _v: &DMatrix<f64>,
        _k: usize,
        _t: f64,
        _t_next: f64,
    ) -> Result<(DMatrix<f64>, Vec<GuidanceDiag>)> {
        Ok((
            DMatrix::zeros(x.nrows(), x.ncols()),
            vec![GuidanceDiag::default(); x.ncols()],
        ))
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Terminal points, one column each.
    pub points: DMatrix<f64>,
    pub traces: Vec<SamplerTrace>,
}

impl SampleOutput {
    pub fn points_2d(&self) -> Vec<[f64; 2]> {
        self.points.column_iter().map(|c| [c[0], c[1]]).collect()
    }
}

fn initial_noise(seed: u64, d: usize, range: std::ops::Range<usize>) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(d, range.len());
    for (j, traj) in range.enumerate() {
        let mut r = rng::substream(seed, "sample/init", traj as u64);
        rng::fill_normal(&mut r, x.column_mut(j).as_mut_slice());
    }
    x
}

fn check_finite(m: &DMatrix<f64>, step: usize) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::TrajectoryDiverged { step })
    }
}

fn integrate_chunk<F: VelocityField + ?Sized, G: StepGuidance>(
    field: &F,
    guidance: &G,
    cfg: &OdeConfig,
    seed: u64,
    range: std::ops::Range<usize>,
) -> Result<(DMatrix<f64>, Vec<SamplerTrace>)> {
    let d = field.dim();
    let times = cfg.times();
    let mut x = initial_noise(seed, d, range.clone());
    let mut states: Vec<G::State> = range.clone().map(|i| guidance.init_state(i)).collect();
    let n_trace = cfg.n_trace.saturating_sub(range.start).min(range.len());
    let mut traces: Vec<SamplerTrace> = (0..n_trace)
        .map(|j| SamplerTrace {
            traj: range.start + j,
            steps: Vec::with_capacity(cfg.n_steps),
            x_end: Vec::new(),
        })
        .collect();
    for k in 0..cfg.n_steps {
        let (t, tn) = (times[k], times[k + 1]);
        let dt = tn - t;
        let v = field.velocity(&x, t)?;
        let (g, diags) = guidance.guidance(&mut states, &x, &v, k, t, tn)?;
        let drift = &v + &g;
        check_finite(&drift, k)?;
        for (j, tr) in traces.iter_mut().enumerate() {
            tr.steps.push(TraceStep {
                step: k,
                t,
                x: x.column(j).iter().copied().collect(),
                v: v.column(j).iter().copied().collect(),
                g: g.column(j).iter().copied().collect(),
                diag: diags[j].clone(),
            });
        }
        match cfg.integrator {
            Integrator::Euler => x += &drift * dt,
            Integrator::Midpoint => {
                let xm = &x + &drift * (0.5 * dt);
                let vm = field.velocity(&xm, t + 0.5 * dt)?;
                x += (vm + &g) * dt;
            }
        }
        check_finite(&x, k)?;
    }
    for (j, tr) in traces.iter_mut().enumerate() {
        tr.x_end = x.column(j).iter().copied().collect();
    }
    if cfg.terminal_clamp {
        let te = cfg.t_end;
        let v = field.velocity(&x, te)?;
        x += v * (1.0 - te);
        check_finite(&x, cfg.n_steps)?;
    }
    Ok((x, traces))
}

/// Integrates `n` trajectories from `N(0, I)` with guidance. Trajectory `i`
/// uses random sub-streams indexed by `i`, so results do not depend on the
/// chunking or thread count.
pub fn integrate<F: VelocityField + ?Sized, G: StepGuidance>(
    field: &F,
    guidance: &G,
    n: usize,
    cfg: &OdeConfig,
    seed: u64,
) -> Result<SampleOutput> {
    cfg.validate()?;
    let d = field.dim();
    let ranges: Vec<_> = (0..n).step_by(cfg.chunk).map(|s| s..(s + cfg.chunk).min(n)).collect();
    let run = |r: &std::ops::Range<usize>| integrate_chunk(field, guidance, cfg, seed, r.clone());
    let results: Vec<Result<_>> = if cfg.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| ranges.par_iter().map(run).collect())
    } else {
        ranges.iter().map(run).collect()
    };
    let mut points = DMatrix::zeros(d, n);
    let mut traces = Vec::new();
    for (r, res) in ranges.iter().zip(results) {
        let (x, tr) = res?;
        points.columns_mut(r.start, r.len()).copy_from(&x);
        traces.extend(tr);
    }
    Ok(SampleOutput { points, traces })
}

/// Unguided sampling.
pub fn sample_ode<F: VelocityField + ?Sized>(field: &F, n: usize, cfg: &OdeConfig, seed: u64) -> Result<SampleOutput> {
    integrate(field, &NoGuidance, n, cfg, seed)
}

pub fn write_points_csv(path: &Path, points: &DMatrix<f64>) -> Result<()> {
    let mut s = String::from("x,y\n");
    for c in points.column_iter() {
        s.push_str(&format!("{},{}\n", c[0], c[1]));
    }
    field2d::write_atomic(path, s.as_bytes())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn write_traces_csv(path: &Path, traces: &[SamplerTrace]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(
        buf,
        "traj,step,t,x,y,v_norm,g_norm,ess,phi,gamma,m,jitter,fallback,skipped"
    )
    .map_err(|e| Error::io(path, e))?;
    for tr in traces {
        for s in &tr.steps {
            let d = &s.diag;
            writeln!(
                buf,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                tr.traj,
                s.step,
                s.t,
                s.x[0],
                s.x.get(1).copied().unwrap_or(0.0),
                norm(&s.v),
                norm(&s.g),
                d.ess.unwrap_or(f64::NAN),
                d.phi.unwrap_or(f64::NAN),
                d.gamma.unwrap_or(f64::NAN),
                d.m,
                d.jitter,
                d.fallback as u8,
                d.skipped as u8
            )
            .map_err(|e| Error::io(path, e))?;
        }
    }
    field2d::write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_velocity_returns_initial_noise() {
        let cfg = OdeConfig {
            n_steps: 10,
            ..Default::default()
        };
        let out = sample_ode(&ZeroVelocity(2), 5, &cfg, 3).unwrap();
        assert_eq!(out.points, initial_noise(3, 2, 0..5));
    }

    #[test]
    fn oracle_velocity_has_zero_loss() {
        let x1 = DMatrix::from_fn(2, 64, |i, j| (i + j) as f64 * 0.1);
        let (_, _, target) = cfm_targets(&x1, &mut rng::substream(0, "c", 0));
        let resid = &target - &target;
        assert_eq!(resid.norm_squared(), 0.0);
    }

    #[test]
    fn initial_loss_is_four_for_standard_normal_data() {
        let model = VelocityModel::new(2, &[16], &mut rng::substream(0, "m", 0)).unwrap();
        let mut r = rng::substream(1, "x1", 0);
        let n = 4096;
        let x1 = DMatrix::from_column_slice(2, n, &rng::normal_vec(&mut r, 2 * n));
        let (loss, _) = cfm_loss_batch(&model, &x1, &mut rng::substream(2, "c", 0)).unwrap();
        // |x1 - x0|^2 ~ 2 chi^2_2: mean 4, variance 16
        let se = (16.0 / n as f64).sqrt();
        assert!((loss - 4.0).abs() < 4.0 * se, "{loss}");
    }

    #[test]
    fn cfm_gradient_matches_finite_differences() {
        let mut model = VelocityModel::new(2, &[6, 6], &mut rng::substream(0, "m", 0)).unwrap();
        let mut p = model.net.params();
        let mut r = rng::substream(9, "p", 0);
        p.iter_mut().for_each(|v| *v += r.gen_range(-0.3..0.3));
        model.net.set_params(&p).unwrap();
        let x1 = DMatrix::from_fn(2, 8, |i, j| ((i * 3 + j) as f64).sin());
        let (_, g) = cfm_loss_batch(&model, &x1, &mut rng::substream(1, "c", 0)).unwrap();
        let h = 1e-5;
        for j in (0..p.len()).step_by(5) {
            let mut m = model.clone();
            let mut q = p.clone();
            q[j] += h;
            m.net.set_params(&q).unwrap();
            let lp = cfm_loss_batch(&m, &x1, &mut rng::substream(1, "c", 0)).unwrap().0;
            q[j] -= 2.0 * h;
            m.net.set_params(&q).unwrap();
            let lm = cfm_loss_batch(&m, &x1, &mut rng::substream(1, "c", 0)).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (g[j] - fd).abs() <= 1e-4 * fd.abs().max(g[j].abs()) + 1e-9,
                "{} {}",
                g[j],
                fd
            );
        }
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let p = crate::field2d::WorldSpec {
            geometry: crate::field2d::Geometry::square(3.5, 32),
            ..Default::default()
        }
        .density()
        .unwrap();
        let cfg = FlowTrainConfig {
            hidden: vec![16, 16],
            steps: 30,
            batch: 32,
            log_every: 10,
            ..Default::default()
        };
        let run = || {
            let mut m = VelocityModel::new(2, &cfg.hidden, &mut rng::substream(0, "m", 0)).unwrap();
            (train_flow(&mut m, &p, &cfg).unwrap(), m)
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert_eq!(h1.len(), 3);
        assert!(h1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn euler_trace_reproduces_steps_bitwise() {
        let model = {
            let mut m = VelocityModel::new(2, &[8], &mut rng::substream(0, "m", 0)).unwrap();
            let p: Vec<f64> = m.net.params().iter().map(|v| v + 0.1).collect();
            m.net.set_params(&p).unwrap();
            m
        };
        let cfg = OdeConfig {
            n_steps: 20,
            n_trace: 3,
            terminal_clamp: false,
            ..Default::default()
        };
        let out = sample_ode(&model, 6, &cfg, 1).unwrap();
        assert_eq!(out.traces.len(), 3);
        let times = cfg.times();
        for tr in &out.traces {
            for (k, s) in tr.steps.iter().enumerate() {
                let next = tr.steps.get(k + 1).map(|n| n.x.clone()).unwrap_or(tr.x_end.clone());
                let dt = times[k + 1] - times[k];
                for i in 0..2 {
                    assert_eq!(next[i], s.x[i] + (s.v[i] + s.g[i]) * dt);
                }
            }
        }
    }

    #[test]
    fn chunking_and_threads_do_not_change_results() {
        let model = VelocityModel::new(2, &[8], &mut rng::substream(0, "m", 0)).unwrap();
        let base = OdeConfig {
            n_steps: 10,
            ..Default::default()
        };
        let a = sample_ode(&model, 50, &base, 7).unwrap().points;
        let b = sample_ode(
            &model,
            50,
            &OdeConfig {
                chunk: 7,
                threads: 3,
                ..base.clone()
            },
            7,
        )
        .unwrap()
        .points;
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = VelocityModel::new(2, &[8], &mut rng::substream(0, "m", 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.tfnn");
        model.save(&p).unwrap();
        assert_eq!(VelocityModel::load(&p).unwrap(), model);
    }
}
