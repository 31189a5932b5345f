//! Finite-difference gradient checks of every differentiable component.
//!
//! `cargo run --release --example grad_check`

use mbdiff::eval::{grad_check, GradTarget};

fn main() -> mbdiff::Result<()> {
    for target in GradTarget::ALL {
        let tolerance = if target == GradTarget::Linear { 1e-10 } else { 1e-4 };
        let report = grad_check(target, tolerance, 0)?;
        println!("{:<18} max relative error {:.2e} (tolerance {tolerance:.0e})", target.name(), report.max_rel());
    }
    Ok(())
}
