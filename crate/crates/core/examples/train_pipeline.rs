//! All three training stages on the planted dataset, evaluated against the
//! decode-the-agnostic-latent baseline.
//!
//! `cargo run --release --example train_pipeline` (about a minute)

use std::time::Instant;

use mbdiff::config::{Config, KeyValues};
use mbdiff::data::{gen_synthetic, SyntheticSpec};
use mbdiff::eval::{evaluate, evaluate_baseline};
use mbdiff::pipeline::{train_all, PreparedData};

fn main() -> mbdiff::Result<()> {
    let synth = gen_synthetic(&SyntheticSpec::planted(7))?;
    let mut cfg = Config::default();
    cfg.apply(&KeyValues::parse(include_str!("../../../configs/planted.conf"))?)?;
    let data = PreparedData::new(&synth.header, &synth.users, &cfg.data)?;

    let start = Instant::now();
    let run = train_all(&data, &cfg)?;
    println!("trained in {:.0}s", start.elapsed().as_secs_f64());
    for (i, log) in run.logs.iter().enumerate() {
        let l = log.losses();
        println!("stage {}: loss {:.4} -> {:.4}", i + 1, l[0], l[l.len() - 1]);
    }

    let guided = evaluate(&run.stage3, &data.tests, &cfg.eval.ks, &cfg.guidance, cfg.train.seed)?;
    let baseline = evaluate_baseline(&run.stage1.mbae, &data.header, &data.tests, &cfg.eval.ks)?;
    println!("guided\n{}\nbaseline\n{}", guided.to_table(), baseline.to_table());
    Ok(())
}
