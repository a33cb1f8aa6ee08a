//! Reproducible experiment runner behind the `tiltflow` binary.
//!
//! A run is described by one JSON document ([`ExperimentConfig`]); every
//! command reads its inputs from and writes its outputs under `out_dir`, and
//! finishes by atomically writing a [`RunManifest`] listing every artifact.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::checks::{self, CheckReport};
use crate::costmodel::{self, CostOracle, CostPredictor, CostTrainConfig, GridCost};
use crate::error::{Error, Result};
use crate::field2d::{self, write_atomic, Geometry, GridField, GridPmf, WorldSpec};
use crate::flow::{self, FlowTrainConfig, OdeConfig, VelocityModel};
use crate::guide::{self, GuidanceConfig, GuidanceMethod};
use crate::optimize::{self, AnnealConfig, OptTrace};
use crate::rng;

/// Which cost oracle drives optimization and guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostSource {
    /// The world's cost field.
    Truth,
    /// Min-SKL predictor checkpoint.
    Best,
    /// Final predictor checkpoint.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; copied into every sub-config that has one.
    pub seed: u64,
    pub world: WorldSpec,
    pub flow: FlowTrainConfig,
    pub cost: CostTrainConfig,
    pub anneal: AnnealConfig,
    pub guidance: GuidanceConfig,
    pub ode: OdeConfig,
    pub cost_source: CostSource,
    /// Samples per (method, λ) in `generate`.
    pub n_samples: usize,
    /// Starts in `optimize`, drawn from `p`.
    pub n_starts: usize,
    /// λ sweep of `gen-world` and `generate`.
    pub lambdas: Vec<f64>,
    pub methods: Vec<GuidanceMethod>,
    /// Cells per side of the histogram evaluation grid.
    pub eval_grid: usize,
    /// Floor of `log p` used by the `-log p` proxy.
    pub log_density_floor: f64,
    /// Output root; falls back to `$TF_OUT_DIR`, then `runs`.
    pub out_dir: Option<PathBuf>,
    /// Worker threads for trajectory fan-out (0 or 1 = serial).
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldSpec::default(),
            flow: FlowTrainConfig::default(),
            cost: CostTrainConfig::default(),
            anneal: AnnealConfig::default(),
            guidance: GuidanceConfig::default(),
            ode: OdeConfig::default(),
            cost_source: CostSource::Truth,
            n_samples: 20_000,
            n_starts: 100,
            lambdas: vec![1.0, 10.0, 100.0],
            methods: GuidanceMethod::ALL.to_vec(),
            eval_grid: 125,
            log_density_floor: -30.0,
            out_dir: None,
            threads: 0,
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `key=value` with a dotted key path; the value is parsed as JSON
/// when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("empty key segment in `{key}`")));
        }
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().unwrap()
            }
            _ => return Err(Error::Config(format!("`{key}`: `{part}` is inside a non-object"))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parse_scalar(raw));
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split always yields one segment")
}

/// Recursively overlays `over` onto `base`; non-object values replace.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Parses a config document, applies overrides, and propagates the seed.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !doc.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        if doc.get("seed").is_none_or(|s| !s.is_u64()) {
            return Err(Error::Config(
                "`seed` is mandatory and must be a non-negative integer".into(),
            ));
        }
        let mut full = serde_json::to_value(Self::default()).expect("config serializes");
        merge(&mut full, doc);
        let mut cfg: Self = serde_json::from_value(full).map_err(|e| Error::Config(e.to_string()))?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, overrides)
    }

    /// Defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        let mut c = Self {
            seed,
            ..Self::default()
        };
        c.propagate_seed();
        c
    }

    pub fn propagate_seed(&mut self) {
        self.world.seed = self.seed;
        self.flow.seed = self.seed;
        self.cost.seed = self.seed;
        self.anneal.seed = self.seed;
        self.ode.threads = self.threads;
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_grid == 0 || self.n_samples == 0 {
            return Err(Error::Config("eval_grid and n_samples must be >= 1".into()));
        }
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("lambdas must be finite and >= 0".into()));
        }
        self.anneal.validate()
    }

    pub fn out_root(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os("TF_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }

    pub fn eval_geometry(&self) -> Geometry {
        let g = self.world.geometry;
        Geometry {
            nx: self.eval_grid,
            ny: self.eval_grid,
            ..g
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub crate_version: String,
    pub config: Value,
    pub phases: Vec<Phase>,
    pub artifacts: Vec<PathBuf>,
}

/// Tracks phases and artifacts of one command invocation.
pub struct Run<'a> {
    pub cfg: &'a ExperimentConfig,
    pub root: PathBuf,
    manifest: RunManifest,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a ExperimentConfig, command: &str) -> Self {
        Self {
            cfg,
            root: cfg.out_root(),
            manifest: RunManifest {
                command: command.to_string(),
                config_hash: cfg.hash(),
                crate_version: env!("CARGO_PKG_VERSION").to_string(),
                config: serde_json::to_value(cfg).expect("config serializes"),
                phases: Vec::new(),
                artifacts: Vec::new(),
            },
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn phase<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self)?;
        self.manifest.phases.push(Phase {
            name: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    fn record(&mut self, path: PathBuf) -> PathBuf {
        if !self.manifest.artifacts.contains(&path) {
            self.manifest.artifacts.push(path.clone());
        }
        path
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(rel);
        write_atomic(&p, bytes)?;
        Ok(self.record(p))
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    /// Runs a writer that targets an absolute path and records it.
    pub fn write_with(&mut self, rel: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
        let p = self.path(rel);
        f(&p)?;
        Ok(self.record(p))
    }

    fn input(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Config(format!(
                "missing input {}; run the producing command first",
                p.display()
            )))
        }
    }

    /// Writes `manifest_<command>.json` and returns the manifest.
    pub fn finish(mut self) -> Result<RunManifest> {
        let rel = format!("manifest_{}.json", self.manifest.command);
        let p = self.path(&rel);
        self.record(p.clone());
        let mut bytes = serde_json::to_vec_pretty(&self.manifest).map_err(|e| Error::Config(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(&p, &bytes)?;
        Ok(self.manifest)
    }
}

/// File-name tag of a λ value.
pub fn lambda_tag(lambda: f64) -> String {
    format!("{lambda}").replace('.', "p")
}

pub const P_PMF: &str = "world/p.pmf";
pub const COST_FIELD: &str = "world/cost.field";
pub const VELOCITY: &str = "flow/velocity.tfnn";
pub const COST_BEST: &str = "cost/best.tfnn";
pub const COST_LAST: &str = "cost/last.tfnn";

/// World files: p, cost, q* per λ (plus λ = 0), and PGM previews.
pub fn cmd_gen_world(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut run = Run::new(cfg, "gen-world");
    let (p, c) = run.phase("synthesize", |_| Ok((cfg.world.density()?, cfg.world.cost()?)))?;
    run.phase("write", |run| {
        run.write_json("world/spec.json", &cfg.world)?;
        run.write(P_PMF, &p.to_bytes())?;
        run.write(COST_FIELD, &c.to_bytes())?;
        run.write("world/p.pgm", &p.to_pgm())?;
        run.write("world/cost.pgm", &c.to_pgm())?;
        let mut lambdas = vec![0.0];
        lambdas.extend(cfg.lambdas.iter().copied().filter(|l| *l != 0.0));
        for l in lambdas {
            let q = field2d::tilt(&p, &c, l)?;
            let tag = lambda_tag(l);
            run.write(&format!("world/q_star_lambda{tag}.pmf"), &q.to_bytes())?;
            run.write(&format!("world/q_star_lambda{tag}.pgm"), &q.to_pgm())?;
        }
        Ok(())
    })?;
    run.finish()
}

fn load_world(run: &Run) -> Result<(GridPmf, GridField)> {
    Ok((
        GridPmf::load(&run.input(P_PMF)?)?,
        GridField::load(&run.input(COST_FIELD)?)?,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowSummary {
    pub final_loss: f64,
    pub n_eval: usize,
    /// KL(hist(unguided samples) ‖ p) on the evaluation grid.
    pub kl_samples_p: f64,
    /// Same for draws of the base normal.
    pub kl_base_p: f64,
}

pub fn cmd_train_flow(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut run = Run::new(cfg, "train-flow");
    let (p, _) = load_world(&run)?;
    let mut model = VelocityModel::new(2, &cfg.flow.hidden, &mut rng::substream(cfg.seed, "flow/init", 0))?;
    let history = run.phase("train", |_| flow::train_flow(&mut model, &p, &cfg.flow))?;
    let summary = run.phase("evaluate", |_| {
        let geom = cfg.eval_geometry();
        let p_eval = costmodel::resample_pmf(&p, geom)?;
        let out = flow::sample_ode(&model, cfg.n_samples, &cfg.ode, cfg.seed)?;
        let h = field2d::histogram(&out.points_2d(), geom)?;
        let mut r = rng::substream(cfg.seed, "flow/base-eval", 0);
        let base: Vec<[f64; 2]> = (0..cfg.n_samples)
            .map(|_| {
                let v = rng::normal_vec(&mut r, 2);
                [v[0], v[1]]
            })
            .collect();
        let hb = field2d::histogram(&base, geom)?;
        Ok(FlowSummary {
            final_loss: history.last().copied().unwrap_or(f64::NAN),
            n_eval: cfg.n_samples,
            kl_samples_p: field2d::kl(&h, &p_eval)?,
            kl_base_p: field2d::kl(&hb, &p_eval)?,
        })
    })?;
    run.phase("write", |run| {
        run.write_with(VELOCITY, |p| model.save(p))?;
        let mut csv = String::from("entry,step,loss\n");
        for (i, l) in history.iter().enumerate() {
            let step = ((i + 1) * cfg.flow.log_every).min(cfg.flow.steps);
            csv.push_str(&format!("{i},{step},{l}\n"));
        }
        run.write("flow/history.csv", csv.as_bytes())?;
        run.write_json("flow/summary.json", &summary)?;
        Ok(())
    })?;
    run.finish()
}

#[derive(Debug, Clone, Serialize)]
pub struct CostSummary {
    pub best_step: usize,
    pub best_mean_skl: f64,
    pub last_mean_skl: f64,
}

pub fn cmd_train_cost(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut run = Run::new(cfg, "train-cost");
    let (p, c) = load_world(&run)?;
    let init = CostPredictor::new(
        &cfg.cost.hidden,
        cfg.cost.lambda_range,
        &mut rng::substream(cfg.seed, "cost/init", 0),
    )?;
    let res = run.phase("train", |_| costmodel::train_cost(init, &p, &c, &cfg.cost))?;
    let last_step = res.history.iter().map(|r| r.step).max().unwrap_or(0);
    let last: Vec<f64> = res
        .history
        .iter()
        .filter(|r| r.step == last_step)
        .map(|r| r.skl)
        .collect();
    let summary = CostSummary {
        best_step: res.best_step,
        best_mean_skl: res.best_mean_skl,
        last_mean_skl: last.iter().sum::<f64>() / last.len().max(1) as f64,
    };
    run.phase("write", |run| {
        run.write_with(COST_LAST, |p| res.last.save(p))?;
        run.write_with(COST_BEST, |p| res.best.save(p))?;
        run.write_with("cost/history.csv", |p| costmodel::write_history_csv(p, &res.history))?;
        run.write_json("cost/summary.json", &summary)?;
        Ok(())
    })?;
    run.finish()
}

fn cost_oracle(run: &Run, c: GridField) -> Result<Box<dyn CostOracle>> {
    Ok(match run.cfg.cost_source {
        CostSource::Truth => Box::new(GridCost { field: c }),
        CostSource::Best => Box::new(CostPredictor::load(&run.input(COST_BEST)?)?),
        CostSource::Last => Box::new(CostPredictor::load(&run.input(COST_LAST)?)?),
    })
}

/// Mean and standard error of a sample.
fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptStats {
    /// Mean ground-truth `J` at the start and after `K` iterations.
    pub initial_mean_cost: f64,
    pub final_mean_cost: f64,
    /// Mean of the `-log p` proxy.
    pub initial_mean_nlp: f64,
    pub final_mean_nlp: f64,
    /// Standard error of the per-start change in `-log p`.
    pub nlp_change_se: f64,
    /// Standard error of the per-start change in `J`.
    pub cost_change_se: f64,
}

impl OptStats {
    pub fn from_traces(traces: &[OptTrace], truth: &GridCost, lambda: f64) -> Result<Self> {
        let j = |x: &[f64]| -> Result<f64> { Ok(truth.value(&DMatrix::from_column_slice(2, 1, x), lambda)?[0]) };
        let mut j0 = Vec::new();
        let mut j1 = Vec::new();
        let mut n0 = Vec::new();
        let mut n1 = Vec::new();
        for t in traces {
            j0.push(j(&t.first().x)?);
            j1.push(j(&t.last().x)?);
            n0.push(t.first().nlp);
            n1.push(t.last().nlp);
        }
        let dj: Vec<f64> = j1.iter().zip(&j0).map(|(a, b)| a - b).collect();
        let dn: Vec<f64> = n1.iter().zip(&n0).map(|(a, b)| a - b).collect();
        Ok(Self {
            initial_mean_cost: mean_se(&j0).0,
            final_mean_cost: mean_se(&j1).0,
            initial_mean_nlp: mean_se(&n0).0,
            final_mean_nlp: mean_se(&n1).0,
            nlp_change_se: mean_se(&dn).1,
            cost_change_se: mean_se(&dj).1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeSummary {
    pub n_starts: usize,
    pub iters: usize,
    pub lambda: f64,
    pub density: OptStats,
    pub baseline: OptStats,
}

/// `n` starts drawn from `p`.
pub fn draw_starts(p: &GridPmf, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::substream(seed, "opt/starts", 0);
    field2d::sample(p, n, &mut r).into_iter().map(|q| q.to_vec()).collect()
}

pub fn cmd_optimize(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut run = Run::new(cfg, "optimize");
    let (p, c) = load_world(&run)?;
    let model = VelocityModel::load(&run.input(VELOCITY)?)?;
    let oracle = cost_oracle(&run, c.clone())?;
    let proxy = p.log_density_field(cfg.log_density_floor)?;
    let nlp = GridField::new(proxy.geom, proxy.values.iter().map(|v| -v).collect())?;
    let starts = draw_starts(&p, cfg.n_starts, cfg.seed);
    let density = run.phase("density", |_| {
        optimize::optimize_many(&starts, oracle.as_ref(), Some(&model), Some(&nlp), &cfg.anneal)
    })?;
    let baseline = run.phase("baseline", |_| {
        starts
            .iter()
            .map(|x0| optimize::optimize_cost_only(x0, oracle.as_ref(), Some(&nlp), &cfg.anneal))
            .collect::<Result<Vec<_>>>()
    })?;
    let truth = GridCost { field: c };
    let summary = OptimizeSummary {
        n_starts: starts.len(),
        iters: cfg.anneal.iters,
        lambda: cfg.anneal.lambda,
        density: OptStats::from_traces(&density, &truth, cfg.anneal.lambda)?,
        baseline: OptStats::from_traces(&baseline, &truth, cfg.anneal.lambda)?,
    };
    run.phase("write", |run| {
        run.write_with("optimize/density.csv", |p| optimize::write_traces_csv(p, &density))?;
        run.write_with("optimize/baseline.csv", |p| optimize::write_traces_csv(p, &baseline))?;
        run.write_json("optimize/summary.json", &summary)?;
        Ok(())
    })?;
    run.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRow {
    pub method: GuidanceMethod,
    pub lambda: f64,
    /// KL(hist ‖ q*) on the evaluation grid; `None` when the run failed.
    pub kl_hist_qstar: Option<f64>,
    pub points: Option<PathBuf>,
    pub error: Option<String>,
}

/// Grid KL of a point cloud against `tilt(p, C, λ)` on the eval geometry.
pub fn kl_to_tilted(points: &[[f64; 2]], p: &GridPmf, c: &GridField, lambda: f64, geom: Geometry) -> Result<f64> {
    let p_eval = costmodel::resample_pmf(p, geom)?;
    let c_eval = c.resample(geom)?;
    let q = field2d::tilt(&p_eval, &c_eval, lambda)?;
    field2d::kl(&field2d::histogram(points, geom)?, &q)
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut run = Run::new(cfg, "generate");
    let (p, c) = load_world(&run)?;
    let model = VelocityModel::load(&run.input(VELOCITY)?)?;
    let oracle = cost_oracle(&run, c.clone())?;
    let geom = cfg.eval_geometry();
    let mut rows = Vec::new();
    for &lambda in &cfg.lambdas {
        for &method in &cfg.methods {
            let gcfg = GuidanceConfig {
                method,
                ..cfg.guidance.clone()
            };
            let name = format!("{}_lambda{}", method.name(), lambda_tag(lambda));
            let out = run.phase(&name, |_| {
                guide::guided_sample(
                    &model,
                    oracle.as_ref(),
                    &gcfg,
                    lambda,
                    &cfg.ode,
                    cfg.n_samples,
                    cfg.seed,
                )
            });
            let row = match out {
                Ok(out) => {
                    let pts = out.points_2d();
                    let path = run.write_with(&format!("generate/{name}.csv"), |p| {
                        flow::write_points_csv(p, &out.points)
                    })?;
                    if !out.traces.is_empty() {
                        run.write_with(&format!("generate/{name}_traces.csv"), |p| {
                            flow::write_traces_csv(p, &out.traces)
                        })?;
                    }
                    let h = field2d::histogram(&pts, geom)?;
                    run.write(&format!("generate/{name}.pgm"), &h.to_pgm())?;
                    GenerateRow {
                        method,
                        lambda,
                        kl_hist_qstar: Some(kl_to_tilted(&pts, &p, &c, lambda, geom)?),
                        points: Some(path),
                        error: None,
                    }
                }
                Err(e) => GenerateRow {
                    method,
                    lambda,
                    kl_hist_qstar: None,
                    points: None,
                    error: Some(e.to_string()),
                },
            };
            rows.push(row);
        }
    }
    run.write_json("generate/summary.json", &rows)?;
    run.finish()
}

/// Runs every theorem check; the report's `pass` flag drives the exit code.
pub fn cmd_check(cfg: &ExperimentConfig) -> Result<(RunManifest, CheckReport)> {
    let mut run = Run::new(cfg, "check");
    let report = run.phase("checks", |_| checks::run_all(cfg.seed))?;
    run.write_json("check/report.json", &report)?;
    Ok((run.finish()?, report))
}

pub fn read_points_csv(path: &Path) -> Result<Vec<[f64; 2]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut it = line.split(',').map(str::parse::<f64>);
        match (it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y))) => out.push([x, y]),
            _ => return Err(bad(format!("line {} is not `x,y`", i + 1))),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictorEval {
    pub checkpoint: String,
    pub lambda: f64,
    pub skl: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluateSummary {
    pub generations: Vec<GenerateRow>,
    pub predictors: Vec<PredictorEval>,
}

/// Recomputes grid KLs of existing generations and scores any saved cost
/// predictors against the ground-truth tilt.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut run = Run::new(cfg, "evaluate");
    let (p, c) = load_world(&run)?;
    let geom = cfg.eval_geometry();
    let summary = run.phase("evaluate", |run| {
        let mut generations = Vec::new();
        for &lambda in &cfg.lambdas {
            for &method in &cfg.methods {
                let path = run.path(&format!("generate/{}_lambda{}.csv", method.name(), lambda_tag(lambda)));
                if !path.exists() {
                    continue;
                }
                let pts = read_points_csv(&path)?;
                generations.push(GenerateRow {
                    method,
                    lambda,
                    kl_hist_qstar: Some(kl_to_tilted(&pts, &p, &c, lambda, geom)?),
                    points: Some(path),
                    error: None,
                });
            }
        }
        let mut predictors = Vec::new();
        let p_eval = costmodel::resample_pmf(&p, cfg.eval_geometry())?;
        let c_eval = c.resample(p_eval.geom)?;
        for (name, rel) in [("best", COST_BEST), ("last", COST_LAST)] {
            let path = run.path(rel);
            if !path.exists() {
                continue;
            }
            let model = CostPredictor::load(&path)?;
            for &lambda in &cfg.cost.eval_lambdas {
                let q = field2d::tilt(&p_eval, &c_eval, lambda)?;
                let qh = costmodel::model_tilted_pmf(&model, &p_eval, lambda)?;
                predictors.push(PredictorEval {
                    checkpoint: name.into(),
                    lambda,
                    skl: 0.5 * (field2d::kl(&q, &qh)? + field2d::kl(&qh, &q)?),
                });
            }
        }
        Ok(EvaluateSummary {
            generations,
            predictors,
        })
    })?;
    run.write_json("evaluate/summary.json", &summary)?;
    run.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(ExperimentConfig::from_json("{}", &[]).is_err());
        assert!(ExperimentConfig::from_json(r#"{"seed": -1}"#, &[]).is_err());
        let c = ExperimentConfig::from_json("{}", &["seed=7".into()]).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.world.seed, 7);
        assert_eq!(c.anneal.seed, 7);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = ExperimentConfig::from_json(
            r#"{"seed": 1}"#,
            &[
                "n_samples=50".into(),
                "guidance.n_mc=4".into(),
                "guidance.method=dps".into(),
                "lambdas=[2]".into(),
                "out_dir=/tmp/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.n_samples, 50);
        assert_eq!(c.guidance.n_mc, 4);
        assert_eq!(c.guidance.method, GuidanceMethod::Dps);
        assert_eq!(c.lambdas, vec![2.0]);
        assert_eq!(c.out_dir, Some(PathBuf::from("/tmp/x")));
        assert!(ExperimentConfig::from_json(r#"{"seed": 1}"#, &["noequals".into()]).is_err());
        assert!(ExperimentConfig::from_json(r#"{"seed": 1}"#, &["n_samples.x=1".into()]).is_err());
    }

    #[test]
    fn partial_nested_objects_keep_defaults() {
        let c = ExperimentConfig::from_json(r#"{"seed": 1, "world": {"geometry": {"nx": 40}}}"#, &[]).unwrap();
        assert_eq!(c.world.geometry.nx, 40);
        assert_eq!(c.world.geometry.ny, Geometry::default().ny);
        assert_eq!(c.world.n_rbf, WorldSpec::default().n_rbf);
    }

    #[test]
    fn unknown_values_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"seed": 1, "guidance": {"method": "nope"}}"#, &[]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::with_seed(1);
        let b = ExperimentConfig::with_seed(2);
        assert_eq!(a.hash(), ExperimentConfig::with_seed(1).hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn lambda_tags_are_filename_safe() {
        assert_eq!(lambda_tag(1.0), "1");
        assert_eq!(lambda_tag(0.5), "0p5");
        assert_eq!(lambda_tag(100.0), "100");
    }

    #[test]
    fn mean_se_basic() {
        let (m, se) = mean_se(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-12);
    }
}
