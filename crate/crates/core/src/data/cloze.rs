use rand::Rng as _;

use super::{Sequence, Vocab};
use crate::rng::Rng;

/// Cloze-masked copies of a set of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub sequences: Vec<Sequence>,
    /// Masked positions of each sequence, ascending.
    pub masked_positions: Vec<Vec<usize>>,
    /// True item at each masked position.
    pub target_items: Vec<Vec<u32>>,
    /// Whether the behavior token at each masked position was also masked.
    pub behavior_masked: Vec<Vec<bool>>,
}

impl MaskedBatch {
    pub fn num_masked(&self) -> usize {
        self.masked_positions.iter().map(Vec::len).sum()
    }
}

/// Masks each real item with probability `rho`; each masked position also has
/// its behavior masked with probability `sigma`. A sequence that draws no
/// mask gets one uniformly chosen real position masked.
pub fn cloze_mask(seqs: &[Sequence], rho: f64, sigma: f64, vocab: &Vocab, rng: &mut Rng) -> MaskedBatch {
    assert!((0.0..=1.0).contains(&rho) && (0.0..=1.0).contains(&sigma));
    let mask = vocab.mask_token();
    let mut batch = MaskedBatch {
        sequences: Vec::with_capacity(seqs.len()),
        masked_positions: Vec::with_capacity(seqs.len()),
        target_items: Vec::with_capacity(seqs.len()),
        behavior_masked: Vec::with_capacity(seqs.len()),
    };
    for s in seqs {
        assert!(s.length_real > 0, "cannot mask an all-pad sequence");
        let mut out = s.clone();
        let mut chosen: Vec<(usize, bool)> = Vec::new();
        for pos in s.first_real()..s.len() {
            if rng.random::<f64>() < rho {
                chosen.push((pos, rng.random::<f64>() < sigma));
            }
        }
        if chosen.is_empty() {
            let pos = rng.random_range(s.first_real()..s.len());
            chosen.push((pos, rng.random::<f64>() < sigma));
        }
        let mut positions = Vec::with_capacity(chosen.len());
        let mut targets = Vec::with_capacity(chosen.len());
        let mut bmask = Vec::with_capacity(chosen.len());
        for (pos, hide) in chosen {
            positions.push(pos);
            targets.push(out.items[pos]);
            out.items[pos] = mask;
            if hide {
                out.behaviors[pos] = mask;
            }
            bmask.push(hide);
        }
        batch.sequences.push(out);
        batch.masked_positions.push(positions);
        batch.target_items.push(targets);
        batch.behavior_masked.push(bmask);
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn seqs(vocab: &Vocab) -> Vec<Sequence> {
        (0..20)
            .map(|u| {
                let n = 1 + u % 8;
                let pairs: Vec<(u32, u32)> = (0..n).map(|k| (k as u32, (k % 3) as u32)).collect();
                Sequence::from_pairs(u as u32, &pairs, 8, vocab)
            })
            .collect()
    }

    #[test]
    fn rho_one_masks_every_real_position() {
        let vocab = Vocab::new(50, 3);
        let s = seqs(&vocab);
        let b = cloze_mask(&s, 1.0, 0.0, &vocab, &mut stream(1, "t", 0));
        for (orig, pos) in s.iter().zip(&b.masked_positions) {
            assert_eq!(*pos, (orig.first_real()..orig.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rho_zero_forces_exactly_one_mask() {
        let vocab = Vocab::new(50, 3);
        let s = seqs(&vocab);
        let b = cloze_mask(&s, 0.0, 0.0, &vocab, &mut stream(1, "t", 0));
        for (orig, pos) in s.iter().zip(&b.masked_positions) {
            assert_eq!(pos.len(), 1);
            assert!(!orig.is_pad(pos[0]));
        }
    }

    #[test]
    fn sigma_one_masks_every_masked_behavior() {
        let vocab = Vocab::new(50, 3);
        let s = seqs(&vocab);
        let b = cloze_mask(&s, 0.5, 1.0, &vocab, &mut stream(2, "t", 0));
        for (k, seq) in b.sequences.iter().enumerate() {
            for (j, &p) in b.masked_positions[k].iter().enumerate() {
                assert!(b.behavior_masked[k][j]);
                assert_eq!(seq.behaviors[p], vocab.mask_token());
                assert_eq!(seq.items[p], vocab.mask_token());
                assert_eq!(b.target_items[k][j], s[k].items[p]);
            }
        }
    }

    #[test]
    fn same_seed_same_batch() {
        let vocab = Vocab::new(50, 3);
        let s = seqs(&vocab);
        let a = cloze_mask(&s, 0.3, 0.4, &vocab, &mut stream(9, "t", 0));
        let b = cloze_mask(&s, 0.3, 0.4, &vocab, &mut stream(9, "t", 0));
        assert_eq!(a, b);
    }
}
