use std::rc::Rc;

use super::rotary::rope_tables;
use super::{Context, LatentPreference, LayerIds, Mbae, PositionMode};
use crate::data::{MaskedBatch, Sequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::dropout;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Sequences encoded per graph when only forward values are needed.
const EVAL_CHUNK: usize = 128;

/// Per-batch masks and rotary tables shared by every layer.
struct BatchGeometry {
    n: usize,
    key_valid: Vec<bool>,
    keep: Vec<f64>,
    rope: Option<(Rc<Vec<f64>>, Rc<Vec<f64>>)>,
    scales: Option<Var>,
}

pub(crate) struct Forward {
    /// `[N·L, d]` final hidden states; pad rows are zero.
    pub hidden: Var,
    /// Per layer, `[N·heads, L, L]` attention probabilities.
    pub attn: Vec<Var>,
}

impl Mbae {
    fn geometry(&self, g: &mut Graph, seqs: &[Sequence]) -> BatchGeometry {
        let len = self.seq_len;
        let key_valid: Vec<bool> = seqs
            .iter()
            .flat_map(|s| (0..len).map(move |p| !s.is_pad(p)))
            .collect();
        let keep = key_valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let rope = (self.cfg.position != PositionMode::Absolute).then(|| {
            rope_tables(seqs.len() * len, len, self.cfg.d, self.cfg.head_dim(), self.cfg.rope_base)
        });
        let scales = (self.cfg.position == PositionMode::BehaviorRotary).then(|| self.scales_var(g, seqs));
        BatchGeometry {
            n: seqs.len(),
            key_valid,
            keep,
            rope,
            scales,
        }
    }

    /// `[N·L, d]` per-pair behavior scales, each pair's factor repeated twice.
    fn scales_var(&self, g: &mut Graph, seqs: &[Sequence]) -> Var {
        let rows = seqs.len() * self.seq_len;
        if let Some(c) = self.modulation_override {
            return g.constant(Tensor::full(&[rows, self.cfg.d], c));
        }
        let net = self.ids.behavior_net.expect("behavior-rotary model has a scale network");
        let table = g.param(&self.store, self.ids.behavior_table);
        let idx = seqs
            .iter()
            .flat_map(|s| {
                (0..self.seq_len).map(move |p| {
                    if s.is_pad(p) {
                        None
                    } else {
                        self.vocab.behavior_row(s.behaviors[p])
                    }
                })
            })
            .collect();
        let e = g.gather(table, idx);
        let raw = net.forward(g, &self.store, e);
        let s = g.softplus(raw);
        g.repeat_pairs(s)
    }

    /// Per-pair scales for one behavior token (`d/2` values, head-major).
    pub fn behavior_scales_for(&self, behavior_token: u32) -> Result<Vec<f64>> {
        if self.cfg.position != PositionMode::BehaviorRotary {
            return Err(Error::Usage("behavior scales exist only in behavior-rotary mode".into()));
        }
        let row = self
            .vocab
            .behavior_row(behavior_token)
            .ok_or_else(|| Error::Usage(format!("unknown behavior token {behavior_token}")))?;
        if let Some(c) = self.modulation_override {
            return Ok(vec![c; self.cfg.d / 2]);
        }
        let mut g = Graph::new();
        let net = self.ids.behavior_net.expect("behavior-rotary model has a scale network");
        let table = g.param(&self.store, self.ids.behavior_table);
        let e = g.gather(table, vec![Some(row)]);
        let raw = net.forward(&mut g, &self.store, e);
        let s = g.softplus(raw);
        Ok(g.value(s).data().to_vec())
    }

    fn embed(&self, g: &mut Graph, seqs: &[Sequence]) -> Var {
        let len = self.seq_len;
        let rows = |f: &dyn Fn(&Sequence, usize) -> Option<usize>| -> Vec<Option<usize>> {
            seqs.iter()
                .flat_map(|s| (0..len).map(move |p| if s.is_pad(p) { None } else { f(s, p) }))
                .collect()
        };
        let items = g.param(&self.store, self.ids.item_table);
        let mut h = g.gather(items, rows(&|s, p| self.vocab.item_row(s.items[p])));
        let absolute = self.cfg.position == PositionMode::Absolute;
        if absolute || self.cfg.behavior_in_input {
            let behaviors = g.param(&self.store, self.ids.behavior_table);
            let b = g.gather(behaviors, rows(&|s, p| self.vocab.behavior_row(s.behaviors[p])));
            h = g.add(h, b);
        }
        if let (true, Some(pos)) = (absolute, self.ids.position_table) {
            let table = g.param(&self.store, pos);
            let p = g.gather(table, rows(&|_, p| Some(p)));
            h = g.add(h, p);
        }
        h
    }

    fn attention_sublayer(&self, g: &mut Graph, layer: &LayerIds, x: Var, geo: &BatchGeometry) -> (Var, Var) {
        let (n, len, d) = (geo.n, self.seq_len, self.cfg.d);
        let (heads, dk) = (self.cfg.heads, self.cfg.head_dim());
        let wq = g.param(&self.store, layer.wq);
        let wk = g.param(&self.store, layer.wk);
        let wv = g.param(&self.store, layer.wv);
        let mut q = g.matmul(x, wq);
        let mut k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        if let Some((cos, sin)) = &geo.rope {
            q = g.rope(q, cos.clone(), sin.clone());
            k = g.rope(k, cos.clone(), sin.clone());
        }
        if let Some(s) = geo.scales {
            q = g.mul(q, s);
            k = g.mul(k, s);
        }
        let split = |g: &mut Graph, t: Var| {
            let t = g.permute(t, [n, len, heads, dk], [0, 2, 1, 3]);
            g.reshape(t, &[n * heads, len, dk])
        };
        let (q, k, v) = (split(g, q), split(g, k), split(g, v));
        let logits = g.batch_matmul(q, k, true);
        let logits = g.scale(logits, 1.0 / (dk as f64).sqrt());
        let attn = g.attn_softmax(logits, &geo.key_valid, heads);
        let ctx = g.batch_matmul(attn, v, false);
        let ctx = g.permute(ctx, [n, heads, len, dk], [0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[n * len, d]);
        let out = layer.wo.forward(g, &self.store, ctx);
        (g.mask_rows(out, &geo.keep), attn)
    }

    /// Full encoder pass. Dropout is active only when `rng` is given.
    pub(crate) fn forward(&self, g: &mut Graph, seqs: &[Sequence], mut rng: Option<&mut Rng>) -> Forward {
        let geo = self.geometry(g, seqs);
        let p = self.cfg.dropout;
        let mut x = self.embed(g, seqs);
        x = dropout(g, x, p, rng.as_deref_mut());
        let mut attn = Vec::with_capacity(self.ids.layers.len());
        for layer in &self.ids.layers {
            let h = layer.norm1.forward(g, &self.store, x);
            let (a, w) = self.attention_sublayer(g, layer, h, &geo);
            let a = dropout(g, a, p, rng.as_deref_mut());
            x = g.add(x, a);
            attn.push(w);
            let h = layer.norm2.forward(g, &self.store, x);
            let f = layer.ffn.forward(g, &self.store, h);
            let f = g.mask_rows(f, &geo.keep);
            let f = dropout(g, f, p, rng.as_deref_mut());
            x = g.add(x, f);
        }
        let x = self.ids.final_norm.forward(g, &self.store, x);
        let hidden = g.mask_rows(x, &geo.keep);
        Forward { hidden, attn }
    }

    /// Input embedding followed by the first attention sublayer, `[N·L, d]`.
    pub(crate) fn attention_probe(&self, g: &mut Graph, seqs: &[Sequence]) -> Var {
        let geo = self.geometry(g, seqs);
        let x = self.embed(g, seqs);
        self.attention_sublayer(g, &self.ids.layers[0], x, &geo).0
    }

    /// Rows of `hidden` at `(sequence index, position)` pairs.
    pub(crate) fn gather_positions(&self, g: &mut Graph, hidden: Var, at: &[(usize, usize)]) -> Var {
        let rows = at.iter().map(|&(s, p)| Some(s * self.seq_len + p)).collect();
        g.gather(hidden, rows)
    }

    /// Full-catalog logits `[N, |V|]` for latents `z: [N, d]`.
    pub(crate) fn decode_var(&self, g: &mut Graph, z: Var) -> Var {
        let f = self.ids.decoder.forward(g, &self.store, z);
        let q = g.add(z, f);
        let items = g.param(&self.store, self.ids.item_table);
        let real = g.gather(items, (0..self.vocab.num_items).map(Some).collect());
        g.matmul_t(q, real)
    }

    /// The `L × d` input embedding of one sequence.
    pub fn embed_sequence(&self, seq: &Sequence) -> Result<Tensor> {
        self.check_sequence(seq)?;
        let mut g = Graph::new();
        let h = self.embed(&mut g, std::slice::from_ref(seq));
        Ok(g.value(h).clone())
    }

    /// One layer's attention sublayer applied to `h` (no normalization, no
    /// residual). Returns the `L × d` output and the `[heads, L, L]` weights.
    pub fn attention(&self, layer: usize, h: &Tensor, seq: &Sequence) -> Result<(Tensor, Tensor)> {
        self.check_sequence(seq)?;
        let ids = self
            .ids
            .layers
            .get(layer)
            .ok_or_else(|| Error::Usage(format!("no encoder layer {layer}")))?;
        let mut g = Graph::new();
        let geo = self.geometry(&mut g, std::slice::from_ref(seq));
        let x = g.constant(h.clone());
        let (out, w) = self.attention_sublayer(&mut g, ids, x, &geo);
        Ok((g.value(out).clone(), g.value(w).clone()))
    }

    /// Eval-mode hidden states of one sequence and its latents at `positions`.
    pub fn encode(&self, seq: &Sequence, positions: &[usize]) -> Result<(Tensor, Vec<LatentPreference>)> {
        self.check_sequence(seq)?;
        for &p in positions {
            if p >= seq.len() || seq.is_pad(p) {
                return Err(Error::Usage(format!("cannot extract a latent at pad position {p}")));
            }
        }
        let mut g = Graph::new();
        let fw = self.forward(&mut g, std::slice::from_ref(seq), None);
        let hidden = g.value(fw.hidden).clone();
        let mask = self.vocab.mask_token();
        let latents = positions
            .iter()
            .map(|&p| LatentPreference {
                z: hidden.row(p).to_vec(),
                context: if seq.behaviors[p] == mask {
                    Context::Agnostic
                } else {
                    Context::Specific(seq.behaviors[p])
                },
            })
            .collect();
        Ok((hidden, latents))
    }

    /// Eval-mode latents `[N, d]`, one per sequence at `positions[i]`.
    pub fn latents(&self, seqs: &[Sequence], positions: &[usize]) -> Result<Tensor> {
        assert_eq!(seqs.len(), positions.len());
        for (s, &p) in seqs.iter().zip(positions) {
            self.check_sequence(s)?;
            if p >= s.len() || s.is_pad(p) {
                return Err(Error::Usage(format!("cannot extract a latent at pad position {p}")));
            }
        }
        let d = self.cfg.d;
        let mut out = Vec::with_capacity(seqs.len() * d);
        for (chunk, pos) in seqs.chunks(EVAL_CHUNK).zip(positions.chunks(EVAL_CHUNK)) {
            let mut g = Graph::new();
            let fw = self.forward(&mut g, chunk, None);
            let at: Vec<(usize, usize)> = pos.iter().copied().enumerate().collect();
            let z = self.gather_positions(&mut g, fw.hidden, &at);
            out.extend_from_slice(g.value(z).data());
        }
        Ok(Tensor::matrix(seqs.len(), d, out))
    }

    /// Full-catalog logits for each row of `z: [N, d]`.
    pub fn decode(&self, z: &Tensor) -> Tensor {
        assert_eq!(z.cols(), self.cfg.d);
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let logits = self.decode_var(&mut g, zv);
        g.value(logits).clone()
    }

    /// Training-mode reconstruction loss of a Cloze batch. Returns the loss,
    /// the logits of every masked position and their targets.
    pub fn cloze_loss(&self, g: &mut Graph, batch: &MaskedBatch, rng: Option<&mut Rng>) -> (Var, Var, Vec<usize>) {
        let fw = self.forward(g, &batch.sequences, rng);
        let mut at = Vec::with_capacity(batch.num_masked());
        let mut targets = Vec::with_capacity(batch.num_masked());
        for (s, (pos, tg)) in batch.masked_positions.iter().zip(&batch.target_items).enumerate() {
            for (&p, &t) in pos.iter().zip(tg) {
                at.push((s, p));
                targets.push(t as usize);
            }
        }
        let z = self.gather_positions(g, fw.hidden, &at);
        let logits = self.decode_var(g, z);
        let loss = g.cross_entropy(logits, targets.clone());
        (loss, logits, targets)
    }

    /// Mean over layers and heads of the eval-mode attention probabilities.
    pub fn attention_maps(&self, seq: &Sequence) -> Result<Tensor> {
        self.check_sequence(seq)?;
        let mut g = Graph::new();
        let fw = self.forward(&mut g, std::slice::from_ref(seq), None);
        let len = self.seq_len;
        let mut acc = vec![0.0; len * len];
        let mut count = 0usize;
        for w in &fw.attn {
            for head in g.value(*w).data().chunks(len * len) {
                acc.iter_mut().zip(head).for_each(|(a, b)| *a += b);
                count += 1;
            }
        }
        acc.iter_mut().for_each(|a| *a /= count as f64);
        Ok(Tensor::matrix(len, len, acc))
    }
}

/// Mean negative log-softmax of each row's target logit.
pub fn mbae_loss(logits: &Tensor, targets: &[usize]) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, targets.to_vec());
    g.value(loss).data()[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocab;
    use crate::mbae::ModelConfig;
    use crate::rng::stream;

    fn model(position: PositionMode, behavior_in_input: bool, len: usize) -> Mbae {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            layers: 2,
            ffn_dim: 16,
            dropout: 0.0,
            position,
            behavior_in_input,
            rope_base: 10000.0,
        };
        let mut m = Mbae::new(cfg, Vocab::new(10, 3), len, &mut stream(11, "encoder-test", 0)).unwrap();
        m.randomize_heads(0.3, &mut stream(11, "encoder-test", 1));
        m
    }

    const PAIRS: [(u32, u32); 3] = [(4, 0), (7, 2), (1, 1)];

    #[test]
    fn attention_rows_are_distributions_over_real_keys() {
        let m = model(PositionMode::BehaviorRotary, true, 6);
        let seq = Sequence::from_pairs(0, &PAIRS, 6, &m.vocab);
        let maps = m.attention_maps(&seq).unwrap();
        for r in seq.first_real()..6 {
            let row = maps.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[..seq.first_real()].iter().all(|&w| w == 0.0));
        }
    }

    #[test]
    fn left_padding_does_not_change_rotary_latents() {
        let short = model(PositionMode::BehaviorRotary, true, 4);
        let mut long = model(PositionMode::BehaviorRotary, true, 7);
        long.store = short.store.clone();
        let a = short.encode(&Sequence::from_pairs(0, &PAIRS, 4, &short.vocab), &[3]).unwrap().1;
        let b = long.encode(&Sequence::from_pairs(0, &PAIRS, 7, &long.vocab), &[6]).unwrap().1;
        for (x, y) in a[0].z.iter().zip(&b[0].z) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn pad_rows_of_hidden_states_are_zero() {
        let m = model(PositionMode::Absolute, true, 6);
        let (h, _) = m.encode(&Sequence::from_pairs(0, &PAIRS, 6, &m.vocab), &[5]).unwrap();
        for p in 0..3 {
            assert!(h.row(p).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn absolute_embedding_sums_three_tables() {
        let m = model(PositionMode::Absolute, true, 4);
        let seq = Sequence::from_pairs(0, &PAIRS, 4, &m.vocab);
        let e = m.embed_sequence(&seq).unwrap();
        let pos = m.store.get(m.ids.position_table.unwrap());
        for (p, &(item, b)) in PAIRS.iter().enumerate() {
            let p = p + 1;
            for j in 0..8 {
                let want = m.item_table().row(item as usize)[j] + m.behavior_table().row(b as usize)[j] + pos.row(p)[j];
                assert_eq!(e.row(p)[j], want);
            }
        }
    }

    #[test]
    fn rotary_embedding_can_omit_behaviors() {
        let m = model(PositionMode::Rotary, false, 4);
        let e = m.embed_sequence(&Sequence::from_pairs(0, &PAIRS, 4, &m.vocab)).unwrap();
        assert_eq!(e.row(2), m.item_table().row(7));
        let with = model(PositionMode::Rotary, true, 4);
        let e = with.embed_sequence(&Sequence::from_pairs(0, &PAIRS, 4, &with.vocab)).unwrap();
        assert_ne!(e.row(2), with.item_table().row(7));
    }

    #[test]
    fn unit_modulation_matches_plain_rotary_bit_for_bit() {
        let rope = model(PositionMode::Rotary, true, 5);
        let mut barope = model(PositionMode::BehaviorRotary, true, 5);
        for id in rope.store.ids() {
            let target = barope.store.find(rope.store.name(id)).unwrap();
            *barope.store.get_mut(target) = rope.store.get(id).clone();
        }
        barope.modulation_override = Some(1.0);
        let seq = Sequence::from_pairs(0, &PAIRS, 5, &rope.vocab);
        assert_eq!(rope.attention_maps(&seq).unwrap(), barope.attention_maps(&seq).unwrap());
        assert_eq!(rope.encode(&seq, &[4]).unwrap().0, barope.encode(&seq, &[4]).unwrap().0);
    }

    #[test]
    fn learned_scales_are_positive_per_pair() {
        let m = model(PositionMode::BehaviorRotary, true, 4);
        for b in 0..3 {
            let s = m.behavior_scales_for(b).unwrap();
            assert_eq!(s.len(), 4);
            assert!(s.iter().all(|&x| x > 0.0));
        }
        assert!(model(PositionMode::Rotary, true, 4).behavior_scales_for(0).is_err());
    }

    #[test]
    fn reconstruction_loss_reference_values() {
        let uniform = Tensor::zeros(&[1, 8]);
        assert!((mbae_loss(&uniform, &[3]) - 8f64.ln()).abs() < 1e-12);
        let mut peaked = Tensor::zeros(&[1, 8]);
        peaked.row_mut(0)[5] = 30.0;
        assert!(mbae_loss(&peaked, &[5]) < 1e-12);
    }

    #[test]
    fn zero_decoder_scores_by_item_similarity() {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            layers: 1,
            ffn_dim: 8,
            dropout: 0.0,
            position: PositionMode::Rotary,
            behavior_in_input: true,
            rope_base: 10000.0,
        };
        let m = Mbae::new(cfg, Vocab::new(10, 3), 4, &mut stream(3, "decoder-test", 0)).unwrap();
        let z = Tensor::matrix(2, 8, (0..16).map(|i| i as f64 / 10.0 - 0.7).collect());
        let logits = m.decode(&z);
        let real = Tensor::from_rows(&(0..10).map(|i| m.item_table().row(i).to_vec()).collect::<Vec<_>>());
        assert!(logits.max_abs_diff(&z.matmul(&real.transpose())) < 1e-15);
    }

    #[test]
    fn latent_context_follows_the_behavior_token() {
        let m = model(PositionMode::BehaviorRotary, true, 5);
        let mask = m.vocab.mask_token();
        let seq = Sequence::from_pairs(0, &PAIRS, 5, &m.vocab);
        let agn = seq.push_slot(mask, mask, &m.vocab);
        let spec = seq.push_slot(mask, 2, &m.vocab);
        assert_eq!(m.encode(&agn, &[4]).unwrap().1[0].context, Context::Agnostic);
        assert_eq!(m.encode(&spec, &[4]).unwrap().1[0].context, Context::Specific(2));
        assert!(m.encode(&seq, &[0]).is_err());
    }

    #[test]
    fn batched_latents_match_single_encodes() {
        let m = model(PositionMode::BehaviorRotary, true, 5);
        let a = Sequence::from_pairs(0, &PAIRS, 5, &m.vocab);
        let b = Sequence::from_pairs(1, &PAIRS[1..], 5, &m.vocab);
        let z = m.latents(&[a.clone(), b.clone()], &[4, 4]).unwrap();
        assert!((z.row(0).iter().zip(&m.encode(&a, &[4]).unwrap().1[0].z)).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!((z.row(1).iter().zip(&m.encode(&b, &[4]).unwrap().1[0].z)).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
