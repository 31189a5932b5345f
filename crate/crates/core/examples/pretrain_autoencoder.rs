//! Masked reconstruction pretraining on the planted dataset, then masked
//! next-item prediction from the pretrained encoder.
//!
//! `cargo run --release --example pretrain_autoencoder [-- <epochs>]`

use mbdiff::config::{Config, KeyValues};
use mbdiff::data::{gen_synthetic, SyntheticSpec};
use mbdiff::pipeline::{rank_items, stage1_pretrain, PreparedData};

fn main() -> mbdiff::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(20, |s| s.parse().expect("epochs"));
    let synth = gen_synthetic(&SyntheticSpec::planted(7))?;
    let mut cfg = Config::default();
    cfg.apply(&KeyValues::parse(include_str!("../../../configs/planted.conf"))?)?;
    cfg.train.stage1.epochs = epochs;
    let data = PreparedData::new(&synth.header, &synth.users, &cfg.data)?;
    let (ckpt, log) = stage1_pretrain(&data, &cfg)?;
    print!("{}", log.to_text());

    let split = &data.tests[0];
    let seq = split.prefix.with_behavior(split.slot(), split.target_behavior);
    let z = ckpt.mbae.latents(std::slice::from_ref(&seq), &[split.slot()])?;
    let top = rank_items(ckpt.mbae.decode(&z).row(0), 5);
    let cluster = synth.manifest.cluster(synth.manifest.archetype(split.user_id), split.target_behavior as usize);
    println!("user {} next {}: top-5 {top:?}, planted cluster {cluster:?}, truth {}",
        split.user_id, synth.header.behavior_name(split.target_behavior as usize), split.target_item);
    Ok(())
}
