use std::collections::BTreeMap;

use super::checkpoint::Checkpoint;
use crate::data::{NextItemSplit, Sequence};
use crate::denoiser::Denoiser;
use crate::diffusion::{sample, standard_normal, GuidanceConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::mbae::Mbae;
use crate::rng::stream;
use crate::tensor::Tensor;

/// Stream tag of the initial noise drawn at inference, indexed by user id.
const INFER_NOISE: &str = "infer-noise";

/// Behavior-agnostic latents at the masked slot of each test prefix.
pub fn agnostic_latents(mbae: &Mbae, splits: &[NextItemSplit]) -> Result<Tensor> {
    let seqs: Vec<Sequence> = splits.iter().map(|s| s.prefix.clone()).collect();
    let slots: Vec<usize> = splits.iter().map(NextItemSplit::slot).collect();
    mbae.latents(&seqs, &slots)
}

/// Guided samples of the behavior-specific latent for each row of `z_agn`.
/// Row `i` starts from noise drawn from stream `(seed, tag, users[i])`, so
/// a row's sample does not depend on the rest of the batch.
#[allow(clippy::too_many_arguments)]
pub fn sample_specific(
    den: &Denoiser,
    z_agn: &Tensor,
    behaviors: &[u32],
    users: &[u32],
    sched: &NoiseSchedule,
    guidance: &GuidanceConfig,
    seed: u64,
    tag: &str,
) -> Result<Tensor> {
    let (n, d) = (z_agn.rows(), z_agn.cols());
    assert_eq!(behaviors.len(), n);
    assert_eq!(users.len(), n);
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &b) in behaviors.iter().enumerate() {
        if b as usize >= den.num_behaviors {
            return Err(Error::Usage(format!("unknown behavior id {b}")));
        }
        groups.entry(b).or_default().push(i);
    }
    let mut out = Tensor::zeros(&[n, d]);
    for (b, rows) in groups {
        let mut zt = Vec::with_capacity(rows.len() * d);
        for &i in &rows {
            zt.extend(standard_normal(1, d, &mut stream(seed, tag, u64::from(users[i]))).into_data());
        }
        let zt = Tensor::matrix(rows.len(), d, zt);
        let z0 = sample(zt, &z_agn.gather_rows(&rows), b, den, sched, guidance)?;
        for (k, &i) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(z0.row(k));
        }
    }
    Ok(out)
}

/// Full-catalog logits `[N, |V|]` from guided diffusion under each split's
/// target behavior.
pub fn score_splits(ckpt: &Checkpoint, splits: &[NextItemSplit], guidance: &GuidanceConfig, seed: u64) -> Result<Tensor> {
    let den = ckpt
        .denoiser
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("scoring needs a trained denoiser".into()))?;
    let sched = ckpt.config.schedule.build()?;
    let z_agn = agnostic_latents(&ckpt.mbae, splits)?;
    let behaviors: Vec<u32> = splits.iter().map(|s| s.target_behavior).collect();
    let users: Vec<u32> = splits.iter().map(|s| s.user_id).collect();
    let z_b = sample_specific(den, &z_agn, &behaviors, &users, &sched, guidance, seed, INFER_NOISE)?;
    Ok(ckpt.mbae.decode(&z_b))
}

/// Logits from decoding the behavior-agnostic latent directly.
pub fn score_baseline(mbae: &Mbae, splits: &[NextItemSplit]) -> Result<Tensor> {
    Ok(mbae.decode(&agnostic_latents(mbae, splits)?))
}

/// The `k` highest-scoring item ids; ties go to the lower id.
pub fn rank_items(logits: &[f64], k: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..logits.len() as u32).collect();
    ids.sort_by(|&a, &b| logits[b as usize].total_cmp(&logits[a as usize]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// 1-based rank of `target` under the ordering of [`rank_items`].
pub fn rank_of(logits: &[f64], target: u32) -> usize {
    let t = logits[target as usize];
    1 + logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > t || (v == t && (i as u32) < target))
        .count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
    /// `k` exceeded the catalog size and was reduced to it.
    pub clipped: bool,
}

/// Top-`k` next items for `prefix` (whose last slot is `(mask, mask)`)
/// under `behavior`.
pub fn infer_next_item(
    ckpt: &Checkpoint,
    prefix: &Sequence,
    behavior: u32,
    k: usize,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<Inference> {
    let vocab = ckpt.mbae.vocab;
    if behavior as usize >= vocab.num_behaviors {
        return Err(Error::Usage(format!(
            "behavior {behavior} is not below |B| = {}",
            vocab.num_behaviors
        )));
    }
    let slot = prefix.len().saturating_sub(1);
    let mask = vocab.mask_token();
    if prefix.is_empty() || prefix.items[slot] != mask || prefix.behaviors[slot] != mask {
        return Err(Error::Usage("the prefix must end with a fully masked slot".into()));
    }
    let split = NextItemSplit {
        user_id: prefix.user_id,
        history: prefix.clone(),
        prefix: prefix.clone(),
        target_item: 0,
        target_behavior: behavior,
    };
    let logits = score_splits(ckpt, std::slice::from_ref(&split), guidance, seed)?;
    let clipped = k > vocab.num_items;
    let items = rank_items(logits.row(0), k.min(vocab.num_items));
    let scores = items.iter().map(|&i| logits.row(0)[i as usize]).collect();
    Ok(Inference { items, scores, clipped })
}
