//! Trains the λ-conditioned cost predictor with the SKL loss and the MSE
//! baseline, then compares grid SKL of the resulting tilted laws.
//!
//! cargo run --release --example train_cost -- [steps]

use tiltflow::costmodel::{train_cost, CostPredictor, CostTrainConfig, LossKind};
use tiltflow::field2d::WorldSpec;
use tiltflow::rng;

fn main() -> tiltflow::error::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let world = WorldSpec {
        seed: 3,
        ..WorldSpec::default()
    };
    let (p, c) = (world.density()?, world.cost()?);
    for loss in [LossKind::Skl, LossKind::Mse] {
        let cfg = CostTrainConfig {
            seed: 3,
            loss,
            steps,
            ..CostTrainConfig::default()
        };
        let init = CostPredictor::new(&cfg.hidden, cfg.lambda_range, &mut rng::substream(3, "cost/init", 0))?;
        let res = train_cost(init, &p, &c, &cfg)?;
        println!(
            "{loss:?}: best step {} mean SKL {:.4}",
            res.best_step, res.best_mean_skl
        );
        for row in res.history.iter().filter(|r| r.step == res.best_step) {
            println!("  λ = {:>5}: SKL {:.4}", row.lambda, row.skl);
        }
    }
    Ok(())
}
