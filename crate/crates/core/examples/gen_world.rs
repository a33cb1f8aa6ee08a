//! Builds the 2D world and writes p, C, q* for a λ sweep and PGM previews.
//!
//! cargo run --release --example gen_world -- [out_dir] [seed]

use tiltflow::experiment::{cmd_gen_world, ExperimentConfig};

fn main() -> tiltflow::error::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).cloned().unwrap_or_else(|| "runs/example".into());
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let mut cfg = ExperimentConfig::with_seed(seed);
    cfg.out_dir = Some(out.into());
    let manifest = cmd_gen_world(&cfg)?;
    for a in &manifest.artifacts {
        println!("{}", a.display());
    }
    Ok(())
}
