#![allow(dead_code)]

use mbdiff::config::{Config, KeyValues};
use mbdiff::data::{gen_synthetic, Manifest, NextItemSplit, SyntheticData, SyntheticSpec};
use mbdiff::mbae::Mbae;
use mbdiff::pipeline::rank_items;

pub const PLANTED_CONF: &str = include_str!("../../../../configs/planted.conf");

pub fn planted_config() -> Config {
    let mut cfg = Config::default();
    cfg.apply(&KeyValues::parse(PLANTED_CONF).unwrap()).unwrap();
    cfg
}

pub fn planted_data() -> SyntheticData {
    gen_synthetic(&SyntheticSpec::planted(7)).unwrap()
}

/// Fraction of `(user, behavior, item)` predictions that fall in the planted
/// cluster of the user's archetype and that behavior.
pub fn in_cluster_rate(manifest: &Manifest, preds: impl IntoIterator<Item = (u32, u32, u32)>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (user, behavior, item) in preds {
        n += 1;
        if manifest.cluster_of(item) == Some((manifest.archetype(user), behavior as usize)) {
            hit += 1;
        }
    }
    hit as f64 / n as f64
}

/// Masked-item top-1 predictions on held-out final positions: the slot
/// carries the true behavior and a masked item. Returns `(user, behavior,
/// predicted item, true item)` per split.
pub fn masked_top1(mbae: &Mbae, splits: &[NextItemSplit]) -> Vec<(u32, u32, u32, u32)> {
    let seqs: Vec<_> = splits
        .iter()
        .map(|s| s.prefix.with_behavior(s.slot(), s.target_behavior))
        .collect();
    let slots: Vec<usize> = splits.iter().map(NextItemSplit::slot).collect();
    let logits = mbae.decode(&mbae.latents(&seqs, &slots).unwrap());
    splits
        .iter()
        .enumerate()
        .map(|(i, s)| (s.user_id, s.target_behavior, rank_items(logits.row(i), 1)[0], s.target_item))
        .collect()
}
