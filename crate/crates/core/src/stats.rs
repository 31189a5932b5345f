//! Item/behavior entropy diagnostics over an interaction log.
//!
//! All quantities are plug-in estimates from empirical frequencies, in bits,
//! with `0 log 0 = 0`.

use std::collections::BTreeMap;

use crate::config::KeyValues;
use crate::data::Interaction;
use crate::error::{Error, Result};

/// Frequency table of `(item, behavior)` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct JointCounts {
    pub counts: BTreeMap<(u32, u32), u64>,
    pub total: u64,
}

impl JointCounts {
    pub fn add(&mut self, item: u32, behavior: u32, n: u64) {
        if n == 0 {
            return;
        }
        *self.counts.entry((item, behavior)).or_insert(0) += n;
        self.total += n;
    }

    pub fn item_marginal(&self) -> BTreeMap<u32, u64> {
        let mut m = BTreeMap::new();
        for (&(i, _), &c) in &self.counts {
            *m.entry(i).or_insert(0) += c;
        }
        m
    }

    pub fn behavior_marginal(&self) -> BTreeMap<u32, u64> {
        let mut m = BTreeMap::new();
        for (&(_, b), &c) in &self.counts {
            *m.entry(b).or_insert(0) += c;
        }
        m
    }
}

pub fn joint_counts<'a>(interactions: impl IntoIterator<Item = &'a Interaction>) -> Result<JointCounts> {
    let mut jc = JointCounts::default();
    for it in interactions {
        jc.add(it.item_id, it.behavior_id, 1);
    }
    if jc.total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(jc)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyReport {
    pub h_i: f64,
    pub h_b: f64,
    pub h_b_given_i: f64,
    pub h_i_given_b: f64,
    pub mi: f64,
}

fn entropy(counts: impl Iterator<Item = u64>, total: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

pub fn entropy_report(jc: &JointCounts) -> EntropyReport {
    assert!(jc.total > 0, "entropy of an empty table");
    let n = jc.total as f64;
    let mi_ = jc.item_marginal();
    let mb = jc.behavior_marginal();
    let h_i = entropy(mi_.values().copied(), n);
    let h_b = entropy(mb.values().copied(), n);
    let (mut h_b_given_i, mut h_i_given_b, mut mi) = (0.0, 0.0, 0.0);
    for (&(i, b), &c) in &jc.counts {
        if c == 0 {
            continue;
        }
        let p = c as f64 / n;
        let (ci, cb) = (mi_[&i] as f64, mb[&b] as f64);
        h_b_given_i -= p * (c as f64 / ci).log2();
        h_i_given_b -= p * (c as f64 / cb).log2();
        mi += p * ((c as f64 * n) / (ci * cb)).log2();
    }
    EntropyReport {
        h_i,
        h_b,
        h_b_given_i,
        h_i_given_b,
        mi,
    }
}

impl EntropyReport {
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("H_I", format!("{:.6}", self.h_i));
        kv.set("H_B", format!("{:.6}", self.h_b));
        kv.set("H_B_given_I", format!("{:.6}", self.h_b_given_i));
        kv.set("H_I_given_B", format!("{:.6}", self.h_i_given_b));
        kv.set("MI", format!("{:.6}", self.mi));
        kv
    }

    /// One tab-separated record with full precision.
    pub fn record(&self) -> String {
        format!(
            "H_I={}\tH_B={}\tH_B_given_I={}\tH_I_given_B={}\tMI={}",
            self.h_i, self.h_b, self.h_b_given_i, self.h_i_given_b, self.mi
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(cells: &[((u32, u32), u64)]) -> JointCounts {
        let mut jc = JointCounts::default();
        for &((i, b), c) in cells {
            jc.add(i, b, c);
        }
        jc
    }

    #[test]
    fn direct_counts() {
        let its = [(1, 1), (2, 2), (2, 2)].map(|(i, b)| Interaction {
            user_id: 0,
            item_id: i,
            behavior_id: b,
            timestamp: 0,
        });
        let jc = joint_counts(&its).unwrap();
        assert_eq!(jc.total, 3);
        assert_eq!(jc.counts[&(2, 2)], 2);
        assert!(matches!(joint_counts(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn bijection_has_one_bit_of_information() {
        let r = entropy_report(&table(&[((1, 1), 1), ((2, 2), 1)]));
        assert_eq!((r.h_i, r.h_b, r.h_b_given_i, r.mi), (1.0, 1.0, 0.0, 1.0));
    }

    #[test]
    fn three_cell_table_matches_closed_form() {
        // p = (1/2, 1/4, 1/4): marginals (3/4, 1/4) on both sides.
        let r = entropy_report(&table(&[((1, 1), 2), ((1, 2), 1), ((2, 1), 1)]));
        let h = -(0.75f64 * 0.75f64.log2() + 0.25 * 0.25f64.log2());
        let joint = 1.5;
        assert!((r.h_i - h).abs() < 1e-12);
        assert!((r.h_b - h).abs() < 1e-12);
        assert!((r.h_b_given_i - (joint - h)).abs() < 1e-12);
        assert!((r.mi - (2.0 * h - joint)).abs() < 1e-12);
        assert!((r.h_i - 0.811278).abs() < 1e-6);
        assert!((r.h_b_given_i - 0.688722).abs() < 1e-6);
        assert!((r.mi - 0.122556).abs() < 1e-6);
    }

    #[test]
    fn uniform_joint_is_independent() {
        let mut cells = Vec::new();
        for i in 0..8 {
            for b in 0..4 {
                cells.push(((i, b), 5));
            }
        }
        let r = entropy_report(&table(&cells));
        assert!((r.h_i - 3.0).abs() < 1e-12);
        assert!((r.h_b - 2.0).abs() < 1e-12);
        assert!(r.mi.abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn chain_rule_identities(cells in prop::collection::vec(((0u32..12, 0u32..5), 0u64..50), 1..40)) {
            let mut jc = table(&cells);
            jc.add(0, 0, 1);
            let r = entropy_report(&jc);
            prop_assert!((r.mi - (r.h_b - r.h_b_given_i)).abs() <= 1e-9);
            prop_assert!((r.mi - (r.h_i - r.h_i_given_b)).abs() <= 1e-9);
            prop_assert!(r.mi >= -1e-12);
            prop_assert!(r.h_b_given_i <= r.h_b + 1e-12);
            prop_assert!(r.h_i_given_b <= r.h_i + 1e-12);
        }

        #[test]
        fn item_relabeling_changes_nothing(cells in prop::collection::vec(((0u32..12, 0u32..5), 1u64..50), 1..40), shift in 1u32..1000) {
            let a = entropy_report(&table(&cells));
            let relabeled: Vec<_> = cells.iter().map(|&((i, b), c)| (((11 - i) * 7 + shift, b), c)).collect();
            let b = entropy_report(&table(&relabeled));
            prop_assert!((a.h_i - b.h_i).abs() < 1e-12);
            prop_assert!((a.mi - b.mi).abs() < 1e-12);
            prop_assert!((a.h_b_given_i - b.h_b_given_i).abs() < 1e-12);
        }
    }
}
