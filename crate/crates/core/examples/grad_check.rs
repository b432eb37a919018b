//! Finite-difference check of every differentiable op on the default
//! architecture.

use hybrid4d::field::FieldConfig;
use hybrid4d::gradcheck::run_all;

fn main() -> hybrid4d::Result<()> {
    let seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let report = run_all(&FieldConfig::default(), seed)?;
    for c in &report.checks {
        println!("{:<24} {:4} coords  {:.2e}", c.op, c.coordinates, c.relative_error);
    }
    println!("max {:.2e}, tolerance {:.0e}: {}", report.max_error(), report.tolerance, if report.passed() { "ok" } else { "FAILED" });
    Ok(())
}
