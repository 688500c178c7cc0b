//! Finite-difference checks of every differentiable component.
//!
//! cargo run --release --example gradient_check -- [SEED]

use cbhvt::gradcheck_suite::run_suite;

fn main() -> cbhvt::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let reports = run_suite(seed)?;
    for r in &reports {
        println!("{:<20} {:>3} tensors  max rel err {:.2e}  {}", r.component, r.checks.len(), r.max_relative_error, if r.passed { "ok" } else { "FAIL" });
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(cbhvt::Error::Numeric(format!("{failed} components failed")));
    }
    Ok(())
}
