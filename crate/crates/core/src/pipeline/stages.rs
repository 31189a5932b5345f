use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::checkpoint::Checkpoint;
use super::infer::sample_specific;
use super::{PreparedData, TrainLog};
use crate::config::Config;
use crate::data::{cloze_mask, Sequence};
use crate::denoiser::Denoiser;
use crate::diffusion::{forward_sample, standard_normal, Cond};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mbae::Mbae;
use crate::params::{AdamW, Grads};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

fn clip(grads: &mut Grads, max_norm: f64) {
    if max_norm > 0.0 {
        let n = grads.global_norm();
        if n > max_norm {
            grads.scale(max_norm / n);
        }
    }
}

fn check_finite(stage: u8, epoch: usize, loss: f64, grads: &Grads) -> Result<()> {
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Diverged(format!(
            "stage {stage}, epoch {epoch}: loss {loss} or its gradient is not finite"
        )));
    }
    Ok(())
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct_top1(logits: &Tensor, targets: &[usize]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|&(r, &t)| argmax(logits.row(r)) == t)
        .count()
}

/// Stage 1: Cloze reconstruction training of the autoencoder.
///
/// The log reports the mean masked-item loss and top-1 accuracy per epoch.
pub fn stage1_pretrain(data: &PreparedData, cfg: &Config) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    let t = &cfg.train;
    let seed = t.seed;
    let mut mbae = Mbae::new(cfg.model.clone(), data.vocab, data.seq_len, &mut stream(seed, "init-mbae", 0))?;
    let mut opt = AdamW::new(t.stage1.lr, t.weight_decay);
    let mut log = TrainLog::new(&["acc"]);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=t.stage1.epochs {
        let mut rng = stream(seed, "stage1", epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut count) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(t.stage1.batch_size) {
            let seqs: Vec<Sequence> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let batch = cloze_mask(&seqs, t.rho, t.sigma, &data.vocab, &mut rng);
            let mut g = Graph::new();
            let (loss, logits, targets) = mbae.cloze_loss(&mut g, &batch, Some(&mut rng));
            let l = g.value(loss).data()[0];
            let mut grads = g.backward(loss);
            check_finite(1, epoch, l, &grads)?;
            loss_sum += l * targets.len() as f64;
            correct += correct_top1(g.value(logits), &targets);
            count += targets.len();
            clip(&mut grads, t.grad_clip);
            opt.step(&mut mbae.store, &grads);
        }
        log.push(epoch, loss_sum / count as f64, &[correct as f64 / count as f64]);
    }
    Ok((Checkpoint::new(cfg.clone(), data.header.clone(), 1, mbae, None), log))
}

/// `(behavior-specific, behavior-agnostic)` latent pairs for diffusion training.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPairs {
    pub specific: Tensor,
    pub agnostic: Tensor,
    pub behaviors: Vec<u32>,
    pub users: Vec<u32>,
}

impl LatentPairs {
    pub fn len(&self) -> usize {
        self.behaviors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.behaviors.is_empty()
    }
}

/// Latent pairs from the most recent `cuts_per_user` prefix cuts of each
/// training sequence (every cut when 0). Cut `k` keeps pairs `0..k` and
/// appends a slot whose item is masked: with the behavior of pair `k`
/// visible for the specific latent, masked for the agnostic one.
pub fn latent_pairs(mbae: &Mbae, seqs: &[Sequence], cuts_per_user: usize) -> Result<LatentPairs> {
    let vocab = &mbae.vocab;
    let mask = vocab.mask_token();
    let (mut spec, mut agn, mut behaviors, mut users) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in seqs {
        let pairs = s.real_pairs();
        let n = pairs.len();
        let first = if cuts_per_user == 0 { 1 } else { n.saturating_sub(cuts_per_user).max(1) };
        for k in first..n {
            let ctx = Sequence::from_pairs(s.user_id, &pairs[..k], s.len(), vocab);
            spec.push(ctx.push_slot(mask, pairs[k].1, vocab));
            agn.push(ctx.push_slot(mask, mask, vocab));
            behaviors.push(pairs[k].1);
            users.push(s.user_id);
        }
    }
    if spec.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let slots = vec![mbae.seq_len - 1; spec.len()];
    Ok(LatentPairs {
        specific: mbae.latents(&spec, &slots)?,
        agnostic: mbae.latents(&agn, &slots)?,
        behaviors,
        users,
    })
}

/// Per example: a timestep uniform on `1..=steps` and whether the behavior
/// condition is replaced by null (probability `null_prob`).
pub fn draw_diffusion_inputs(n: usize, steps: usize, null_prob: f64, rng: &mut Rng) -> Vec<(usize, bool)> {
    (0..n)
        .map(|_| (rng.random_range(1..=steps), rng.random::<f64>() < null_prob))
        .collect()
}

/// Stage 2: noise-prediction training of the denoiser on frozen latents.
///
/// The log reports the mean noise-prediction loss and the null fraction.
pub fn stage2_train_ldm(data: &PreparedData, prev: &Checkpoint, cfg: &Config) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    prev.check_compatible(cfg, 1)?;
    let t = &cfg.train;
    let seed = t.seed;
    let mbae = &prev.mbae;
    let d = mbae.d();
    let nb = data.vocab.num_behaviors;
    let pairs = latent_pairs(mbae, &data.train, t.cuts_per_user)?;
    let sched = cfg.schedule.build()?;
    let mut den = Denoiser::new(cfg.denoiser.clone(), d, nb, &mut stream(seed, "init-denoiser", 0))?;
    let mut opt = AdamW::new(t.stage2.lr, t.weight_decay);
    let mut log = TrainLog::new(&["null_frac"]);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=t.stage2.epochs {
        let mut rng = stream(seed, "stage2", epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut nulls) = (0.0, 0usize);
        for chunk in order.chunks(t.stage2.batch_size) {
            let draws = draw_diffusion_inputs(chunk.len(), sched.steps(), cfg.guidance.null_prob, &mut rng);
            let eps = standard_normal(chunk.len(), d, &mut rng);
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (r, &(_, null)) in draws.iter().enumerate() {
                let key = if null { nb } else { pairs.behaviors[chunk[r]] as usize };
                groups.entry(key).or_default().push(r);
            }
            nulls += groups.get(&nb).map_or(0, Vec::len);
            let mut g = Graph::new();
            let mut total: Option<Var> = None;
            for (&key, rows) in &groups {
                let cond = if key == nb { Cond::Null } else { Cond::Behavior(key as u32) };
                let (mut zt, mut za, mut target, mut ts) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                for &r in rows {
                    let i = chunk[r];
                    let tt = draws[r].0;
                    zt.extend(forward_sample(pairs.specific.row(i), tt, eps.row(r), &sched)?);
                    za.extend_from_slice(pairs.agnostic.row(i));
                    target.extend_from_slice(eps.row(r));
                    ts.push(tt);
                }
                let m = rows.len();
                let l = den.loss_var(
                    &mut g,
                    &Tensor::matrix(m, d, zt),
                    &ts,
                    &Tensor::matrix(m, d, za),
                    cond,
                    Rc::new(Tensor::matrix(m, d, target)),
                );
                let l = g.scale(l, m as f64 / chunk.len() as f64);
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l),
                });
            }
            let loss = total.expect("non-empty batch");
            let l = g.value(loss).data()[0];
            let mut grads = g.backward(loss);
            check_finite(2, epoch, l, &grads)?;
            loss_sum += l * chunk.len() as f64;
            clip(&mut grads, t.grad_clip);
            opt.step(&mut den.store, &grads);
        }
        let n = pairs.len() as f64;
        log.push(epoch, loss_sum / n, &[nulls as f64 / n]);
    }
    let ckpt = Checkpoint::new(cfg.clone(), data.header.clone(), 2, prev.mbae.clone(), Some(den));
    Ok((ckpt, log))
}

/// Next-item examples for decoder fine-tuning: the last pair of each
/// training sequence is the target, the rest plus a masked slot the prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage3Examples {
    pub prefixes: Vec<Sequence>,
    pub items: Vec<u32>,
    pub behaviors: Vec<u32>,
    pub users: Vec<u32>,
}

pub fn stage3_examples(data: &PreparedData) -> Stage3Examples {
    let mask = data.vocab.mask_token();
    let mut ex = Stage3Examples {
        prefixes: Vec::new(),
        items: Vec::new(),
        behaviors: Vec::new(),
        users: Vec::new(),
    };
    for s in &data.train {
        let mut pairs = s.real_pairs();
        if pairs.len() < 2 {
            continue;
        }
        let (item, beh) = pairs.pop().expect("length checked");
        let ctx = Sequence::from_pairs(s.user_id, &pairs, s.len(), &data.vocab);
        ex.prefixes.push(ctx.push_slot(mask, mask, &data.vocab));
        ex.items.push(item);
        ex.behaviors.push(beh);
        ex.users.push(s.user_id);
    }
    ex
}

/// Stage 3: decoder fine-tuning on next-item targets decoded from latents
/// sampled by the frozen denoiser. Fresh initial noise per example and epoch.
///
/// The log reports the mean cross-entropy and top-1 accuracy.
pub fn stage3_finetune(data: &PreparedData, prev: &Checkpoint, cfg: &Config) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    prev.check_compatible(cfg, 2)?;
    let t = &cfg.train;
    let seed = t.seed;
    let den = prev
        .denoiser
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("stage-2 checkpoint has no denoiser".into()))?;
    let ex = stage3_examples(data);
    if ex.items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sched = cfg.schedule.build()?;
    let mut mbae = prev.mbae.clone();
    mbae.freeze_all_but_decoder();
    let slots = vec![mbae.seq_len - 1; ex.prefixes.len()];
    let z_agn = mbae.latents(&ex.prefixes, &slots)?;
    let mut opt = AdamW::new(t.stage3.lr, t.weight_decay);
    let mut log = TrainLog::new(&["acc"]);
    let mut order: Vec<usize> = (0..ex.items.len()).collect();
    let d = mbae.d();
    for epoch in 1..=t.stage3.epochs {
        let tag = format!("stage3-noise-{epoch}");
        let z_b = sample_specific(den, &z_agn, &ex.behaviors, &ex.users, &sched, &cfg.guidance, seed, &tag)?;
        let mut rng = stream(seed, "stage3", epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(t.stage3.batch_size) {
            let rows: Vec<f64> = chunk.iter().flat_map(|&i| z_b.row(i).iter().copied()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| ex.items[i] as usize).collect();
            let mut g = Graph::new();
            let z = g.constant(Tensor::matrix(chunk.len(), d, rows));
            let logits = mbae.decode_var(&mut g, z);
            let loss = g.cross_entropy(logits, targets.clone());
            let l = g.value(loss).data()[0];
            let mut grads = g.backward(loss);
            check_finite(3, epoch, l, &grads)?;
            loss_sum += l * chunk.len() as f64;
            correct += correct_top1(g.value(logits), &targets);
            clip(&mut grads, t.grad_clip);
            opt.step(&mut mbae.store, &grads);
        }
        let n = ex.items.len() as f64;
        log.push(epoch, loss_sum / n, &[correct as f64 / n]);
    }
    mbae.set_trainable(true);
    let ckpt = Checkpoint::new(cfg.clone(), data.header.clone(), 3, mbae, prev.denoiser.clone());
    Ok((ckpt, log))
}

/// The checkpoints and logs of a full three-stage run.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub stage1: Checkpoint,
    pub stage2: Checkpoint,
    pub stage3: Checkpoint,
    pub logs: [TrainLog; 3],
}

pub fn train_all(data: &PreparedData, cfg: &Config) -> Result<TrainedRun> {
    let (stage1, l1) = stage1_pretrain(data, cfg)?;
    let (stage2, l2) = stage2_train_ldm(data, &stage1, cfg)?;
    let (stage3, l3) = stage3_finetune(data, &stage2, cfg)?;
    Ok(TrainedRun {
        stage1,
        stage2,
        stage3,
        logs: [l1, l2, l3],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::pipeline::PreparedData;

    fn tiny() -> (PreparedData, Config) {
        let mut spec = SyntheticSpec::planted(3);
        spec.num_users = 40;
        spec.seq_len_range = (4, 8);
        let synth = gen_synthetic(&spec).unwrap();
        let mut cfg = Config::default();
        for (k, v) in [
            ("data.seq_len", "8"),
            ("model.d", "8"),
            ("model.ffn_dim", "16"),
            ("denoiser.hidden", "16"),
            ("diffusion.T", "20"),
            ("diffusion.stride", "5"),
            ("stage1.epochs", "2"),
            ("stage2.epochs", "2"),
            ("stage3.epochs", "2"),
            ("stage1.batch_size", "16"),
            ("stage2.batch_size", "32"),
            ("stage3.batch_size", "16"),
        ] {
            cfg.set(k, v).unwrap();
        }
        let data = PreparedData::new(&synth.header, &synth.users, &cfg.data).unwrap();
        (data, cfg)
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn timesteps_uniform_and_null_rate() {
        let n = 100_000;
        let steps = 200;
        let p = 0.2;
        let draws = draw_diffusion_inputs(n, steps, p, &mut stream(11, "t-hist", 0));
        let mut hist = vec![0usize; steps + 1];
        for &(t, _) in &draws {
            hist[t] += 1;
        }
        assert_eq!(hist[0], 0);
        let e = n as f64 / steps as f64;
        let chi2: f64 = hist[1..].iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
        // Upper 1% point of chi-square with 199 degrees of freedom.
        assert!(chi2 < 249.45, "chi2 {chi2}");
        let nulls = draws.iter().filter(|d| d.1).count() as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((nulls / n as f64 - p).abs() <= 3.0 * se);
    }

    #[test]
    fn latent_pairs_use_recent_cuts() {
        let (data, cfg) = tiny();
        let mbae = Mbae::new(cfg.model.clone(), data.vocab, data.seq_len, &mut stream(0, "m", 0)).unwrap();
        let all = latent_pairs(&mbae, &data.train, 0).unwrap();
        let expect: usize = data.train.iter().map(|s| s.length_real - 1).sum();
        assert_eq!(all.len(), expect);
        let two = latent_pairs(&mbae, &data.train, 2).unwrap();
        let expect: usize = data.train.iter().map(|s| (s.length_real - 1).min(2)).sum();
        assert_eq!(two.len(), expect);
        assert_ne!(two.specific, two.agnostic);
    }

    #[test]
    fn stages_touch_only_their_parameters() {
        let (data, cfg) = tiny();
        let (s1, log1) = stage1_pretrain(&data, &cfg).unwrap();
        assert_eq!(log1.rows.len(), 2);
        let (s2, _) = stage2_train_ldm(&data, &s1, &cfg).unwrap();
        assert_eq!(s1.mbae.store, s2.mbae.store);
        let (s3, log3) = stage3_finetune(&data, &s2, &cfg).unwrap();
        assert_eq!(log3.rows.len(), 2);
        assert_eq!(s2.denoiser, s3.denoiser);
        for (name, t) in s2.mbae.store.iter() {
            let after = s3.mbae.store.get(s3.mbae.store.find(name).unwrap());
            if name.starts_with(crate::mbae::DECODER_PREFIX) {
                continue;
            }
            assert_eq!(t, after, "{name} changed in stage 3");
        }
        assert_ne!(
            s2.mbae.store.snapshot_prefix(crate::mbae::DECODER_PREFIX),
            s3.mbae.store.snapshot_prefix(crate::mbae::DECODER_PREFIX)
        );
    }

    #[test]
    fn stage_order_is_enforced() {
        let (data, cfg) = tiny();
        let (s1, _) = stage1_pretrain(&data, &cfg).unwrap();
        assert!(matches!(stage3_finetune(&data, &s1, &cfg), Err(Error::Checkpoint(_))));
        let mut other = cfg.clone();
        other.model.d = 16;
        assert!(matches!(stage2_train_ldm(&data, &s1, &other), Err(Error::Checkpoint(_))));
    }
}
