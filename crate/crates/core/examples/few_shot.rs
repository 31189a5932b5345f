//! Recall of the rarest behavior as its training interactions are removed.
//!
//! `cargo run --release --example few_shot` (several minutes)

use mbdiff::config::{Config, KeyValues};
use mbdiff::data::{gen_synthetic, SyntheticSpec};
use mbdiff::eval::few_shot_curve;

fn main() -> mbdiff::Result<()> {
    let synth = gen_synthetic(&SyntheticSpec::planted(7))?;
    let mut cfg = Config::default();
    cfg.apply(&KeyValues::parse(include_str!("../../../configs/planted.conf"))?)?;
    let buy = 3;
    println!("{:>6} {:>10} {:>8}", "ratio", "remaining", "R@10");
    for p in few_shot_curve(&synth.header, &synth.users, buy, &[0.0, 0.5, 1.0], &cfg)? {
        println!("{:>6} {:>10} {:>8.4}", p.ratio, p.remaining, p.report.recall(10));
    }
    Ok(())
}
