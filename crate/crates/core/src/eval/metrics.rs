use std::fmt::Write as _;

use crate::config::KeyValues;
use crate::data::{DatasetHeader, NextItemSplit};
use crate::diffusion::GuidanceConfig;
use crate::error::{Error, Result};
use crate::mbae::Mbae;
use crate::pipeline::{rank_items, rank_of, score_baseline, score_splits, Checkpoint};
use crate::tensor::Tensor;

/// 1 if the target is ranked within the top `k`, else 0. `None` is a miss.
pub fn recall_at_k(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r >= 1 && r <= k => 1.0,
        _ => 0.0,
    }
}

/// `1 / log2(rank + 1)` within the top `k` (one relevant item), else 0.
pub fn ndcg_at_k(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r >= 1 && r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `None` for the overall group.
    pub behavior: Option<u32>,
    pub label: String,
    pub count: usize,
    /// Parallel to the report's `ks`.
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

fn group(behavior: Option<u32>, label: String, ranks: &[usize], ks: &[usize]) -> Metrics {
    let n = ranks.len() as f64;
    let mean = |f: fn(Option<usize>, usize) -> f64, k: usize| ranks.iter().map(|&r| f(Some(r), k)).sum::<f64>() / n;
    Metrics {
        behavior,
        label,
        count: ranks.len(),
        recall: ks.iter().map(|&k| mean(recall_at_k, k)).collect(),
        ndcg: ks.iter().map(|&k| mean(ndcg_at_k, k)).collect(),
    }
}

/// Ranking metrics over a test set, overall and per target behavior.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub overall: Metrics,
    /// Behaviors that occur in the test set, ascending.
    pub per_behavior: Vec<Metrics>,
    /// Per test triple: user, target behavior, target rank, top items.
    pub rankings: Vec<(u32, u32, usize, Vec<u32>)>,
    /// Configuration the report was produced under.
    pub config: KeyValues,
}

impl EvalReport {
    /// Aggregates full-catalog `logits` (one row per split).
    pub fn from_logits(
        logits: &Tensor,
        splits: &[NextItemSplit],
        ks: &[usize],
        header: &DatasetHeader,
        config: KeyValues,
    ) -> Result<Self> {
        if splits.is_empty() {
            return Err(Error::EmptyDataset);
        }
        assert_eq!(logits.rows(), splits.len());
        let kmax = ks.iter().copied().max().unwrap_or(0);
        let rankings: Vec<(u32, u32, usize, Vec<u32>)> = splits
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let row = logits.row(i);
                (s.user_id, s.target_behavior, rank_of(row, s.target_item), rank_items(row, kmax))
            })
            .collect();
        let all: Vec<usize> = rankings.iter().map(|r| r.2).collect();
        let overall = group(None, "all".into(), &all, ks);
        let per_behavior = (0..header.num_behaviors as u32)
            .filter_map(|b| {
                let ranks: Vec<usize> = rankings.iter().filter(|r| r.1 == b).map(|r| r.2).collect();
                (!ranks.is_empty()).then(|| group(Some(b), header.behavior_name(b as usize), &ranks, ks))
            })
            .collect();
        Ok(Self {
            ks: ks.to_vec(),
            overall,
            per_behavior,
            rankings,
            config,
        })
    }

    fn k_index(&self, k: usize) -> usize {
        self.ks.iter().position(|&x| x == k).unwrap_or_else(|| panic!("K = {k} was not evaluated"))
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.overall.recall[self.k_index(k)]
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.overall.ndcg[self.k_index(k)]
    }

    pub fn behavior(&self, b: u32) -> Option<&Metrics> {
        self.per_behavior.iter().find(|m| m.behavior == Some(b))
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:>6}", "behavior", "n");
        for k in &self.ks {
            let _ = write!(s, " {:>9} {:>9}", format!("R@{k}"), format!("N@{k}"));
        }
        s.push('\n');
        for m in self.per_behavior.iter().chain(std::iter::once(&self.overall)) {
            let _ = write!(s, "{:<12} {:>6}", m.label, m.count);
            for (r, n) in m.recall.iter().zip(&m.ndcg) {
                let _ = write!(s, " {r:>9.4} {n:>9.4}");
            }
            s.push('\n');
        }
        s
    }

    /// Machine-readable block: `recall@10=…`, `recall@10.fav=…`, ….
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("tests", self.overall.count);
        for m in std::iter::once(&self.overall).chain(&self.per_behavior) {
            let suffix = match m.behavior {
                None => String::new(),
                Some(_) => format!(".{}", m.label),
            };
            if m.behavior.is_some() {
                kv.set(format!("count{suffix}"), m.count);
            }
            for (i, k) in self.ks.iter().enumerate() {
                kv.set(format!("recall@{k}{suffix}"), m.recall[i]);
                kv.set(format!("ndcg@{k}{suffix}"), m.ndcg[i]);
            }
        }
        kv
    }

    /// One line per test triple: `user behavior rank item…`.
    pub fn rankings_text(&self) -> String {
        let mut s = String::new();
        for (u, b, r, items) in &self.rankings {
            let items: Vec<String> = items.iter().map(u32::to_string).collect();
            let _ = writeln!(s, "{u} {b} {r} {}", items.join(" "));
        }
        s
    }
}

/// Guided-diffusion evaluation of a fully trained checkpoint.
pub fn evaluate(
    ckpt: &Checkpoint,
    splits: &[NextItemSplit],
    ks: &[usize],
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<EvalReport> {
    if splits.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let logits = score_splits(ckpt, splits, guidance, seed)?;
    let mut config = ckpt.config.to_kv();
    config.set("diffusion.omega", guidance.omega);
    config.set("diffusion.stride", guidance.stride);
    config.set("eval.seed", seed);
    EvalReport::from_logits(&logits, splits, ks, &ckpt.header, config)
}

/// Evaluation of the no-diffusion baseline: the behavior-agnostic latent
/// decoded directly.
pub fn evaluate_baseline(mbae: &Mbae, header: &DatasetHeader, splits: &[NextItemSplit], ks: &[usize]) -> Result<EvalReport> {
    if splits.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let logits = score_baseline(mbae, splits)?;
    let mut config = KeyValues::new();
    config.set("scoring", "agnostic-decode");
    EvalReport::from_logits(&logits, splits, ks, header, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Sequence, Vocab};
    use proptest::prelude::*;

    #[test]
    fn single_target_metrics() {
        assert_eq!(recall_at_k(Some(1), 10), 1.0);
        assert_eq!(recall_at_k(Some(11), 10), 0.0);
        assert_eq!(recall_at_k(None, 10), 0.0);
        assert_eq!(ndcg_at_k(Some(1), 10), 1.0);
        assert!((ndcg_at_k(Some(3), 10) - 0.5).abs() < 1e-15);
        assert_eq!(ndcg_at_k(Some(11), 10), 0.0);
    }

    fn splits(targets: &[(u32, u32)]) -> Vec<NextItemSplit> {
        let vocab = Vocab::new(6, 2);
        targets
            .iter()
            .enumerate()
            .map(|(u, &(item, beh))| {
                let s = Sequence::from_pairs(u as u32, &[(0, 0)], 3, &vocab);
                NextItemSplit {
                    user_id: u as u32,
                    history: s.clone(),
                    prefix: s,
                    target_item: item,
                    target_behavior: beh,
                }
            })
            .collect()
    }

    fn header() -> DatasetHeader {
        DatasetHeader {
            num_users: 3,
            num_items: 6,
            num_behaviors: 2,
            behavior_names: vec!["view".into(), "buy".into()],
        }
    }

    #[test]
    fn averaging_and_behavior_decomposition() {
        let logits = Tensor::from_rows(&[
            vec![5.0, 4.0, 3.0, 2.0, 1.0, 0.0],
            vec![5.0, 4.0, 3.0, 2.0, 1.0, 0.0],
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
        ]);
        let sp = splits(&[(0, 0), (4, 1), (5, 1)]);
        let r = EvalReport::from_logits(&logits, &sp, &[1, 3], &header(), KeyValues::new()).unwrap();
        assert!((r.recall(1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.behavior(1).unwrap().recall, vec![0.5, 0.5]);
        for i in 0..2 {
            let weighted: f64 = r.per_behavior.iter().map(|m| m.recall[i] * m.count as f64).sum::<f64>() / 3.0;
            assert!((weighted - r.overall.recall[i]).abs() < 1e-12);
        }
        assert_eq!(r.rankings[1], (1, 1, 5, vec![0, 1, 2]));
        assert!(r.to_table().contains("buy"));
        assert_eq!(r.to_kv().get("recall@1.view"), Some("1"));
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let logits = Tensor::zeros(&[0, 6]);
        assert!(EvalReport::from_logits(&logits, &[], &[10], &header(), KeyValues::new()).is_err());
    }

    proptest! {
        #[test]
        fn metrics_monotone_in_k_and_rank_only(
            v in proptest::collection::vec(-50i32..50, 6),
            target in 0u32..6,
        ) {
            let raw: Vec<f64> = v.iter().map(|&x| x as f64 / 7.0).collect();
            let warped: Vec<f64> = raw.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            let sp = splits(&[(target, 0)]);
            let ks = [1, 2, 3, 4, 5, 6];
            let a = EvalReport::from_logits(&Tensor::from_rows(&[raw]), &sp, &ks, &header(), KeyValues::new()).unwrap();
            let b = EvalReport::from_logits(&Tensor::from_rows(&[warped]), &sp, &ks, &header(), KeyValues::new()).unwrap();
            prop_assert_eq!(&a.overall, &b.overall);
            for w in a.overall.recall.windows(2) { prop_assert!(w[0] <= w[1]); }
            for w in a.overall.ndcg.windows(2) { prop_assert!(w[0] <= w[1]); }
            prop_assert_eq!(a.recall(6), 1.0);
        }
    }
}
