//! Averaged attention of a briefly pretrained encoder over one user's
//! history, as a labelled grid.
//!
//! `cargo run --release --example attention_map`

use mbdiff::config::{Config, KeyValues};
use mbdiff::data::{gen_synthetic, SyntheticSpec};
use mbdiff::mbae::{attention_legend, write_attention_grid};
use mbdiff::pipeline::{stage1_pretrain, PreparedData};

fn main() -> mbdiff::Result<()> {
    let synth = gen_synthetic(&SyntheticSpec::planted(7))?;
    let mut cfg = Config::default();
    cfg.apply(&KeyValues::parse(include_str!("../../../configs/planted.conf"))?)?;
    cfg.train.stage1.epochs = 10;
    let data = PreparedData::new(&synth.header, &synth.users, &cfg.data)?;
    let (ckpt, _) = stage1_pretrain(&data, &cfg)?;

    let seq = &data.train[0];
    let grid = ckpt.mbae.attention_maps(seq)?;
    for (i, label) in attention_legend(seq, &data.header).iter().enumerate() {
        println!("{i:>3} {label}");
    }
    print!("{}", write_attention_grid(&grid));
    for b in 0..4 {
        let s = ckpt.mbae.behavior_scales_for(b)?;
        println!("{:<6} scales {:.3?}", data.header.behavior_name(b as usize), &s[..4]);
    }
    Ok(())
}
