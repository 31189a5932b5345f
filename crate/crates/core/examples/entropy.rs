//! Item/behavior entropies of the planted dataset.
//!
//! `cargo run --release --example entropy`

use mbdiff::data::{gen_synthetic, SyntheticSpec};
use mbdiff::stats::{entropy_report, joint_counts};

fn main() -> mbdiff::Result<()> {
    let synth = gen_synthetic(&SyntheticSpec::planted(7))?;
    let report = entropy_report(&joint_counts(synth.users.iter().flat_map(|u| &u.interactions))?);
    for (k, v) in report.to_kv().iter() {
        println!("{k:<12} {v} bits");
    }
    // Clusters are disjoint per behavior, so the item almost fixes the behavior.
    println!("H(B|I) / H(B) = {:.3}", report.h_b_given_i / report.h_b);
    Ok(())
}
