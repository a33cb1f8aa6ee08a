//! Trains a flow-matching velocity field on a synthetic 2D density and
//! compares histogram KLs of flow samples, base-normal draws and exact draws.
//!
//! cargo run --release --example train_flow -- [seed] [steps]

use std::time::Instant;

use tiltflow::costmodel::resample_pmf;
use tiltflow::field2d::{self, Geometry, WorldSpec};
use tiltflow::flow::{sample_ode, train_flow, FlowTrainConfig, OdeConfig, VelocityModel};
use tiltflow::rng;

fn main() -> tiltflow::error::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let steps: usize = args
        .get(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(FlowTrainConfig::default().steps);

    let world = WorldSpec {
        seed,
        ..WorldSpec::default()
    };
    let p = world.density()?;
    let cfg = FlowTrainConfig {
        seed,
        steps,
        ..FlowTrainConfig::default()
    };
    let mut model = VelocityModel::new(2, &cfg.hidden, &mut rng::substream(seed, "flow/init", 0))?;
    let start = Instant::now();
    let history = train_flow(&mut model, &p, &cfg)?;
    println!(
        "trained {steps} steps in {:.1}s, final loss {:.4}",
        start.elapsed().as_secs_f64(),
        history.last().unwrap()
    );

    for (n, cells) in [(20_000, 125), (50_000, 50)] {
        let geom = Geometry {
            nx: cells,
            ny: cells,
            ..world.geometry
        };
        let p_eval = resample_pmf(&p, geom)?;
        let flow_pts = sample_ode(&model, n, &OdeConfig::default(), seed)?.points_2d();
        let mut r = rng::substream(seed, "example/base", 0);
        let base: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                let v = rng::normal_vec(&mut r, 2);
                [v[0], v[1]]
            })
            .collect();
        let exact = field2d::sample(&p, n, &mut rng::substream(seed, "example/exact", 0));
        println!("n = {n}, grid {cells}x{cells}");
        for (name, pts) in [("flow", &flow_pts), ("base normal", &base), ("exact draws", &exact)] {
            let kl = field2d::kl(&field2d::histogram(pts, geom)?, &p_eval)?;
            println!("  KL(hist[{name}] || p) = {kl:.4}");
        }
    }
    Ok(())
}
