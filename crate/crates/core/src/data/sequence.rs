use super::{Interaction, UserHistory, Vocab};
use crate::error::{Error, Result};

/// A left-padded window of `(item, behavior)` tokens for one user.
///
/// Positions `[0, L - length_real)` are padding; the most recent interaction
/// sits at `L - 1`. Padding is defined by `length_real`, not by the token
/// values stored in the prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub user_id: u32,
    pub items: Vec<u32>,
    pub behaviors: Vec<u32>,
    pub length_real: usize,
}

impl Sequence {
    /// Left-pads `pairs` (oldest first) to `len`, keeping the most recent
    /// `len` pairs when there are more.
    pub fn from_pairs(user_id: u32, pairs: &[(u32, u32)], len: usize, vocab: &Vocab) -> Self {
        let keep = &pairs[pairs.len().saturating_sub(len)..];
        let pad = vocab.pad_token();
        let n_pad = len - keep.len();
        let mut items = vec![pad; n_pad];
        let mut behaviors = vec![pad; n_pad];
        for &(i, b) in keep {
            items.push(i);
            behaviors.push(b);
        }
        Self {
            user_id,
            items,
            behaviors,
            length_real: keep.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn first_real(&self) -> usize {
        self.len() - self.length_real
    }

    pub fn is_pad(&self, pos: usize) -> bool {
        pos < self.first_real()
    }

    /// Non-pad `(item, behavior)` pairs, oldest first.
    pub fn real_pairs(&self) -> Vec<(u32, u32)> {
        (self.first_real()..self.len())
            .map(|i| (self.items[i], self.behaviors[i]))
            .collect()
    }

    /// Copy with the behavior token at `pos` replaced.
    pub fn with_behavior(&self, pos: usize, behavior: u32) -> Self {
        let mut s = self.clone();
        s.behaviors[pos] = behavior;
        s
    }

    /// Appends `(item, behavior)` as the newest slot, dropping the oldest
    /// position so the length stays fixed.
    pub fn push_slot(&self, item: u32, behavior: u32, vocab: &Vocab) -> Self {
        let mut pairs = self.real_pairs();
        pairs.push((item, behavior));
        Self::from_pairs(self.user_id, &pairs, self.len(), vocab)
    }
}

/// Left-padded fixed-length sequences, one per user, in input order.
pub fn build_sequences(users: &[UserHistory], len: usize, vocab: &Vocab) -> Result<Vec<Sequence>> {
    if len == 0 {
        return Err(Error::Config("sequence length must be positive".into()));
    }
    users
        .iter()
        .map(|u| {
            if u.is_empty() {
                return Err(Error::Usage(format!("user {} has no interactions", u.user_id)));
            }
            let pairs: Vec<(u32, u32)> = u
                .interactions
                .iter()
                .map(|i| (i.item_id, i.behavior_id))
                .collect();
            Ok(Sequence::from_pairs(u.user_id, &pairs, len, vocab))
        })
        .collect()
}

/// Drops users with fewer than `min` interactions.
pub fn filter_min_interactions(users: Vec<UserHistory>, min: usize) -> Vec<UserHistory> {
    users.into_iter().filter(|u| u.len() >= min).collect()
}

/// Leave-one-out split of one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NextItemSplit {
    pub user_id: u32,
    /// The sequence without its final pair (left-padded to `L`).
    pub history: Sequence,
    /// `history` plus a trailing `(mask, mask)` slot at `L - 1`: the input for
    /// behavior-agnostic encoding of the slot being predicted.
    pub prefix: Sequence,
    pub target_item: u32,
    pub target_behavior: u32,
}

impl NextItemSplit {
    /// Position of the slot being predicted.
    pub fn slot(&self) -> usize {
        self.prefix.len() - 1
    }
}

#[derive(Clone, Debug, Default)]
pub struct SplitOutcome {
    pub splits: Vec<NextItemSplit>,
    /// Users skipped because they had fewer than two real interactions.
    pub skipped: usize,
}

pub fn next_item_split(seqs: &[Sequence], vocab: &Vocab) -> SplitOutcome {
    let mut out = SplitOutcome::default();
    let mask = vocab.mask_token();
    for s in seqs {
        if s.length_real < 2 {
            out.skipped += 1;
            continue;
        }
        let mut pairs = s.real_pairs();
        let (target_item, target_behavior) = pairs.pop().expect("length checked");
        let history = Sequence::from_pairs(s.user_id, &pairs, s.len(), vocab);
        let prefix = history.push_slot(mask, mask, vocab);
        out.splits.push(NextItemSplit {
            user_id: s.user_id,
            history,
            prefix,
            target_item,
            target_behavior,
        });
    }
    out
}

/// Interaction-level leave-one-out: `(training interactions, held-out last)`.
pub fn split_last(user: &UserHistory) -> Option<(Vec<Interaction>, Interaction)> {
    let (last, rest) = user.interactions.split_last()?;
    Some((rest.to_vec(), *last))
}
