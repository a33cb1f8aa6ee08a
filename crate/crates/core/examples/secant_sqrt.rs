//! Builds a compact secant covariance from damped pairs, factors it without
//! forming a d×d matrix, and draws correlated proposals `L ε`.
//!
//! cargo run --release --example secant_sqrt -- [d] [pairs]

use nalgebra::DVector;
use tiltflow::checks::random_damped_pairs;
use tiltflow::oracle::dense_b_recursion;
use tiltflow::rng;
use tiltflow::secant::{factor_probe, semi_numerical_sqrt, update_b};

fn main() -> tiltflow::error::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let d: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let k: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let mut r = rng::substream(1, "example/secant", 0);
    let pairs = random_damped_pairs(&mut r, d, k)?;
    let b = update_b(&pairs, 1.0, d)?;
    println!(
        "d = {d}, pairs = {k}, low-rank width = {}, gamma = {:.4}",
        b.rank(),
        b.gamma
    );

    let dense = dense_b_recursion(&pairs, 1.0, d)?;
    println!(
        "compact vs dense recursion: {:.2e}",
        (b.dense() - &dense).norm() / dense.norm()
    );

    let f = semi_numerical_sqrt(&b)?;
    println!(
        "|L L^T p - B p| / |B p| on a probe: {:.2e}",
        factor_probe(&b, &f, &mut r)
    );
    println!("jitter {:.1e}, fallback {}", f.jitter, f.fallback);

    let eps = DVector::from_vec(rng::normal_vec(&mut r, d));
    let xi = f.apply_l(&eps);
    println!("|eps| = {:.3}, |L eps| = {:.3}", eps.norm(), xi.norm());
    Ok(())
}
