use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use tiltflow::experiment::{self, ExperimentConfig, GenerateRow, OptimizeSummary};
use tiltflow::field2d::{GridPmf, WorldSpec};
use tiltflow::flow::{self, VelocityModel};
use tiltflow::guide::GuidanceMethod;

fn tiny(dir: &Path) -> ExperimentConfig {
    let overrides: Vec<String> = [
        "world.geometry.nx=48",
        "world.geometry.ny=48",
        "flow.hidden=[16,16]",
        "flow.steps=60",
        "flow.log_every=20",
        "cost.hidden=[16]",
        "cost.steps=40",
        "cost.eval_interval=20",
        "cost.eval_grid=32",
        "anneal.iters=20",
        "n_starts=6",
        "n_samples=300",
        "eval_grid=24",
        "lambdas=[2]",
        "guidance.n_mc=8",
        "ode.n_steps=12",
        "ode.n_trace=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("out_dir=\"{}\"", dir.display())])
    .collect();
    ExperimentConfig::from_json(r#"{"seed": 11}"#, &overrides).unwrap()
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&read(path)).unwrap()
}

fn all_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(all_files(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn full_pipeline_contracts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let root = tmp.path();

    experiment::cmd_gen_world(&cfg).unwrap();
    let p_bytes = read(root.join("world/p.pmf"));
    assert_eq!(read(root.join("world/q_star_lambda0.pmf")), p_bytes);
    experiment::cmd_gen_world(&cfg).unwrap();
    assert_eq!(read(root.join("world/p.pmf")), p_bytes);
    let pgm = read(root.join("world/cost.pgm"));
    assert!(pgm.starts_with(b"P5"));

    experiment::cmd_train_flow(&cfg).unwrap();
    let hist = String::from_utf8(read(root.join("flow/history.csv"))).unwrap();
    assert!(hist.starts_with("entry,step,loss\n"));
    assert_eq!(hist.lines().count(), 1 + 3);
    assert!(!hist.contains("NaN"));

    experiment::cmd_train_cost(&cfg).unwrap();
    assert!(root.join("cost/best.tfnn").exists() && root.join("cost/last.tfnn").exists());
    let cs = json(root.join("cost/summary.json"));
    assert!(cs["best_mean_skl"].as_f64().unwrap() <= cs["last_mean_skl"].as_f64().unwrap() + 1e-12);

    experiment::cmd_optimize(&cfg).unwrap();
    let os: OptimizeSummary = serde_json::from_slice(&read(root.join("optimize/summary.json"))).unwrap();
    assert_eq!(os.n_starts, 6);
    assert_eq!(os.density.initial_mean_cost, os.baseline.initial_mean_cost);
    assert!(os.density.final_mean_nlp.is_finite() && os.baseline.final_mean_nlp.is_finite());
    let trace = String::from_utf8(read(root.join("optimize/density.csv"))).unwrap();
    assert_eq!(trace.lines().count(), 1 + 6 * 21);

    experiment::cmd_generate(&cfg).unwrap();
    let rows: Vec<GenerateRow> = serde_json::from_slice(&read(root.join("generate/summary.json"))).unwrap();
    assert_eq!(rows.len(), GuidanceMethod::ALL.len());
    for r in &rows {
        assert!(r.error.is_none(), "{r:?}");
        assert!(r.kl_hist_qstar.unwrap() >= 0.0);
    }

    // Method `none` is exactly the plain sampler.
    let model = VelocityModel::load(&root.join(experiment::VELOCITY)).unwrap();
    let plain = flow::sample_ode(&model, cfg.n_samples, &cfg.ode, cfg.seed).unwrap();
    let pts = experiment::read_points_csv(&root.join("generate/none_lambda2.csv")).unwrap();
    assert_eq!(pts, plain.points_2d());

    experiment::cmd_evaluate(&cfg).unwrap();
    let ev = json(root.join("evaluate/summary.json"));
    assert_eq!(ev["generations"].as_array().unwrap().len(), rows.len());
    for (g, r) in ev["generations"].as_array().unwrap().iter().zip(&rows) {
        assert_eq!(g["kl_hist_qstar"].as_f64(), r.kl_hist_qstar);
    }
    assert_eq!(
        ev["predictors"].as_array().unwrap().len(),
        2 * cfg.cost.eval_lambdas.len()
    );

    // Every file under the output root is listed by some manifest.
    let mut listed: Vec<PathBuf> = Vec::new();
    for cmd in [
        "gen-world",
        "train-flow",
        "train-cost",
        "optimize",
        "generate",
        "evaluate",
    ] {
        let m = json(root.join(format!("manifest_{cmd}.json")));
        assert_eq!(m["config_hash"].as_str().unwrap(), cfg.hash());
        assert!(!m["phases"].as_array().unwrap().is_empty());
        listed.extend(
            m["artifacts"]
                .as_array()
                .unwrap()
                .iter()
                .map(|a| PathBuf::from(a.as_str().unwrap())),
        );
    }
    for f in all_files(root) {
        assert!(listed.contains(&f), "{} not in any manifest", f.display());
    }
}

#[test]
fn training_histories_are_seed_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let cfg = tiny(d);
        experiment::cmd_gen_world(&cfg).unwrap();
        experiment::cmd_train_flow(&cfg).unwrap();
        experiment::cmd_train_cost(&cfg).unwrap();
        experiment::cmd_optimize(&cfg).unwrap();
    }
    for rel in [
        "flow/history.csv",
        "cost/history.csv",
        "flow/velocity.tfnn",
        "cost/best.tfnn",
        "optimize/summary.json",
    ] {
        assert_eq!(read(a.path().join(rel)), read(b.path().join(rel)), "{rel}");
    }
}

#[test]
fn missing_inputs_name_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let err = experiment::cmd_train_flow(&tiny(tmp.path())).unwrap_err().to_string();
    assert!(err.contains("p.pmf"), "{err}");
}

#[test]
fn q_star_files_match_tilt() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    experiment::cmd_gen_world(&cfg).unwrap();
    let spec: WorldSpec = serde_json::from_slice(&read(tmp.path().join("world/spec.json"))).unwrap();
    assert_eq!(spec, cfg.world);
    let q = GridPmf::load(&tmp.path().join("world/q_star_lambda2.pmf")).unwrap();
    let want = tiltflow::field2d::tilt(&spec.density().unwrap(), &spec.cost().unwrap(), 2.0).unwrap();
    assert_eq!(q, want);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tiltflow"))
}

#[test]
fn binary_requires_seed_and_runs_gen_world() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["gen-world", "--set"])
        .arg(format!("out_dir=\"{}\"", tmp.path().display()))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        format!(
            r#"{{"seed": 4, "out_dir": "{}", "lambdas": [1]}}"#,
            tmp.path().display()
        ),
    )
    .unwrap();
    let out = bin()
        .args(["gen-world", "--config"])
        .arg(&cfg_path)
        .args([
            "--set",
            "world.geometry.nx=32",
            "--set",
            "world.geometry.ny=32",
            "--threads",
            "1",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("world/q_star_lambda1.pmf").exists());
    let m = json(tmp.path().join("manifest_gen-world.json"));
    assert_eq!(m["config"]["threads"], 1);
}

#[test]
fn binary_lists_all_subcommands() {
    let out = bin().arg("--help").output().unwrap();
    let help = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "gen-world",
        "train-flow",
        "train-cost",
        "optimize",
        "generate",
        "check",
        "evaluate",
    ] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
}
