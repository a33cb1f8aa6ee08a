//! The closed-form Gaussian world: exact velocity, score and posterior, and
//! a check that the velocity-derived score and posterior covariance agree
//! with them.
//!
//! cargo run --release --example analytic_gaussian

use nalgebra::DVector;
use tiltflow::oracle::{fd_jacobian, GaussianWorld};
use tiltflow::schedule::Schedule;

fn main() -> tiltflow::error::Result<()> {
    let world = GaussianWorld::new([0.5, -0.3], [[2.0, 0.3], [0.3, 0.5]])?;
    let sched = Schedule::default();
    let x = DVector::from_column_slice(&[0.8, -1.1]);
    for t in [0.1, 0.25, 0.5, 0.75, 0.9] {
        let v = world.analytic_velocity(&x, t);
        let score = DVector::from_vec(sched.score_from_velocity(x.as_slice(), v.as_slice(), t));
        let score_err = (score - world.analytic_score(&x, t)).norm();
        let mean = |y: &DVector<f64>| {
            let v = world.analytic_velocity(y, t);
            DVector::from_vec(sched.posterior_mean(y.as_slice(), v.as_slice(), t))
        };
        let c = sched.coeffs(t);
        let cov_from_jac = fd_jacobian(mean, &x, 1e-5) * (c.sigma * c.sigma / c.alpha);
        let (_, cov) = world.analytic_posterior(&x, t);
        println!(
            "t = {t:.2}: score err {score_err:.1e}, (σ²/α)·dμ/dx vs Σ_post err {:.1e}",
            (cov_from_jac - cov).norm()
        );
    }
    Ok(())
}
