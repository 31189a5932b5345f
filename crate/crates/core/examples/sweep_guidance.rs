//! Recall against the guidance strength, writing the table and an SVG plot.
//!
//! `cargo run --release --example sweep_guidance [-- <out-dir>]`

use mbdiff::config::{Config, KeyValues};
use mbdiff::data::{gen_synthetic, SyntheticSpec};
use mbdiff::eval::{sweep, SweepAxis};
use mbdiff::pipeline::PreparedData;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir: std::path::PathBuf = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("mbdiff-sweep"), Into::into);
    std::fs::create_dir_all(&dir)?;
    let synth = gen_synthetic(&SyntheticSpec::planted(7))?;
    let mut cfg = Config::default();
    cfg.apply(&KeyValues::parse(include_str!("../../../configs/planted.conf"))?)?;
    let data = PreparedData::new(&synth.header, &synth.users, &cfg.data)?;

    let result = sweep(&data, &cfg, SweepAxis::Omega, &[0.0, 0.5, 1.0, 2.0, 4.0])?;
    print!("{}", result.to_table());
    std::fs::write(dir.join("sweep_omega.svg"), result.to_svg())?;
    println!("plot written to {}", dir.join("sweep_omega.svg").display());
    Ok(())
}
