use rand::seq::SliceRandom;

use super::metrics::{evaluate, EvalReport};
use crate::config::Config;
use crate::data::{DatasetHeader, UserHistory};
use crate::error::{Error, Result};
use crate::pipeline::{train_all, training_histories, PreparedData};
use crate::rng::stream;

/// Removes `⌊ratio · n_b⌋` uniformly chosen interactions of `behavior` from
/// the training histories; every other interaction is kept in order.
pub fn few_shot_drop(train: &[UserHistory], behavior: u32, ratio: f64, seed: u64) -> Result<Vec<UserHistory>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("omission ratio {ratio} is outside [0, 1]")));
    }
    let mut targets: Vec<(usize, usize)> = Vec::new();
    for (u, h) in train.iter().enumerate() {
        for (k, it) in h.interactions.iter().enumerate() {
            if it.behavior_id == behavior {
                targets.push((u, k));
            }
        }
    }
    let drop = (ratio * targets.len() as f64).floor() as usize;
    targets.shuffle(&mut stream(seed, "few-shot", u64::from(behavior)));
    let mut removed = vec![Vec::new(); train.len()];
    for &(u, k) in &targets[..drop] {
        removed[u].push(k);
    }
    Ok(train
        .iter()
        .zip(removed)
        .map(|(h, rm)| UserHistory {
            user_id: h.user_id,
            interactions: h
                .interactions
                .iter()
                .enumerate()
                .filter(|(k, _)| !rm.contains(k))
                .map(|(_, it)| *it)
                .collect(),
        })
        .collect())
}

/// Result of retraining with one omission ratio.
#[derive(Clone, Debug)]
pub struct FewShotPoint {
    pub ratio: f64,
    /// Target-behavior training interactions left after the drop.
    pub remaining: usize,
    /// Evaluation on the untouched test triples of the target behavior.
    pub report: EvalReport,
}

/// Full retrain and evaluation per omission ratio of `behavior`.
pub fn few_shot_curve(
    header: &DatasetHeader,
    users: &[UserHistory],
    behavior: u32,
    ratios: &[f64],
    cfg: &Config,
) -> Result<Vec<FewShotPoint>> {
    let base = training_histories(users);
    let mut out = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let train = few_shot_drop(&base, behavior, ratio, cfg.train.seed)?;
        let remaining = train
            .iter()
            .flat_map(|h| &h.interactions)
            .filter(|it| it.behavior_id == behavior)
            .count();
        let data = PreparedData::with_training(header, users, Some(train), &cfg.data)?;
        let tests: Vec<_> = data.tests.iter().filter(|s| s.target_behavior == behavior).cloned().collect();
        let run = train_all(&data, cfg)?;
        let mut report = evaluate(&run.stage3, &tests, &cfg.eval.ks, &cfg.guidance, cfg.train.seed)?;
        report.config.set("few_shot.behavior", behavior);
        report.config.set("few_shot.ratio", ratio);
        out.push(FewShotPoint {
            ratio,
            remaining,
            report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;
    use std::collections::BTreeSet;

    fn histories() -> Vec<UserHistory> {
        (0..10u32)
            .map(|u| UserHistory {
                user_id: u,
                interactions: (0..21u32)
                    .map(|k| Interaction {
                        user_id: u,
                        item_id: k,
                        behavior_id: k % 2,
                        timestamp: u64::from(k),
                    })
                    .collect(),
            })
            .collect()
    }

    fn count(h: &[UserHistory], b: u32) -> usize {
        h.iter().flat_map(|u| &u.interactions).filter(|i| i.behavior_id == b).count()
    }

    fn others(h: &[UserHistory], b: u32) -> BTreeSet<(u32, u32, u64)> {
        h.iter()
            .flat_map(|u| &u.interactions)
            .filter(|i| i.behavior_id != b)
            .map(|i| (i.user_id, i.item_id, i.timestamp))
            .collect()
    }

    #[test]
    fn floor_rule_and_extremes() {
        let h = histories();
        // 10 users x 10 odd positions of behavior 1, plus one more: 101 in total.
        let mut h101 = h.clone();
        h101[0].interactions.push(Interaction {
            user_id: 0,
            item_id: 99,
            behavior_id: 1,
            timestamp: 99,
        });
        assert_eq!(count(&h101, 1), 101);
        assert_eq!(count(&few_shot_drop(&h101, 1, 0.5, 3).unwrap(), 1), 51);
        assert_eq!(few_shot_drop(&h, 1, 0.0, 3).unwrap(), h);
        let all = few_shot_drop(&h, 1, 1.0, 3).unwrap();
        assert_eq!(count(&all, 1), 0);
        assert_eq!(others(&all, 1), others(&h, 1));
        assert!(few_shot_drop(&h, 1, 1.5, 3).is_err());
    }

    #[test]
    fn selection_is_seeded() {
        let h = histories();
        let a = few_shot_drop(&h, 0, 0.3, 8).unwrap();
        assert_eq!(a, few_shot_drop(&h, 0, 0.3, 8).unwrap());
        assert_ne!(a, few_shot_drop(&h, 0, 0.3, 9).unwrap());
        assert_eq!(others(&a, 0), others(&h, 0));
    }
}
