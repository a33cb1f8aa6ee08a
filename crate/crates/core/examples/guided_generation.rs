//! Guided generation with every estimator against the tilted target
//! q* ∝ p exp(-λ C), scored by histogram KL on a 125² grid.
//!
//! cargo run --release --example guided_generation -- [lambda] [n]

use tiltflow::costmodel::GridCost;
use tiltflow::experiment::kl_to_tilted;
use tiltflow::field2d::{Geometry, WorldSpec};
use tiltflow::flow::{train_flow, FlowTrainConfig, OdeConfig, VelocityModel};
use tiltflow::guide::{guided_sample, GuidanceConfig, GuidanceMethod};
use tiltflow::rng;

fn main() -> tiltflow::error::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let lambda: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let seed = 3;
    let world = WorldSpec {
        seed,
        ..WorldSpec::default()
    };
    let (p, c) = (world.density()?, world.cost()?);
    let fcfg = FlowTrainConfig {
        seed,
        ..FlowTrainConfig::default()
    };
    let mut flow = VelocityModel::new(2, &fcfg.hidden, &mut rng::substream(seed, "flow/init", 0))?;
    train_flow(&mut flow, &p, &fcfg)?;

    let cost = GridCost { field: c.clone() };
    let geom = Geometry {
        nx: 125,
        ny: 125,
        ..world.geometry
    };
    for method in GuidanceMethod::ALL {
        let cfg = GuidanceConfig {
            method,
            ..GuidanceConfig::default()
        };
        let out = guided_sample(&flow, &cost, &cfg, lambda, &OdeConfig::default(), n, seed)?;
        let kl = kl_to_tilted(&out.points_2d(), &p, &c, lambda, geom)?;
        println!("{:>7}: KL(hist || q*) = {kl:.4}", method.name());
    }
    Ok(())
}
