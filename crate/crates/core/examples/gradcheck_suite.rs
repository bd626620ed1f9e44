//! Central-difference gradient checks of every tensor primitive and every
//! training loss.
//!
//! `cargo run --release --example gradcheck_suite`

use lensless::enhance::loss_gradcheck_suite;
use lensless::tensor::{primitive_suite, GRADCHECK_TOL};

fn main() -> lensless::Result<()> {
    let mut reports = primitive_suite(1)?;
    reports.extend(loss_gradcheck_suite(1)?);
    for r in &reports {
        println!("{:<28} {:.2e} {}", r.name, r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed (tolerance {GRADCHECK_TOL:e})", reports.len());
    Ok(())
}
