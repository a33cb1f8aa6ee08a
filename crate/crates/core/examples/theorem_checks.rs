//! Runs the randomized theorem checks and the Monte Carlo versus quadrature
//! comparison, printing a JSON report.

use tiltflow::checks;

fn main() -> tiltflow::error::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let report = checks::run_all(seed)?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    let mc = checks::mc_vs_quadrature(seed, 10, 4096)?;
    for r in &mc.rows {
        println!("{:7} config {:2}: |z| <= {:.2}", r.method, r.config, r.max_z);
    }
    println!(
        "mc vs quadrature: max z = {:.3}, min ess = {:.0}, pass = {}",
        mc.max_z, mc.min_ess, mc.pass
    );
    if !(report.pass && mc.pass) {
        std::process::exit(1);
    }
    Ok(())
}
