//! Interaction logs, fixed-length multi-behavior sequences and the batches
//! built from them.

mod cloze;
mod io;
mod sequence;
mod synthetic;

pub use cloze::{cloze_mask, MaskedBatch};
pub use io::{
    group_interactions, header_path, load_dataset, load_interactions, parse_interactions,
    read_header, write_header, write_interactions, Dataset, DatasetHeader, UserHistory,
};
pub use sequence::{
    build_sequences, filter_min_interactions, next_item_split, split_last, NextItemSplit,
    Sequence, SplitOutcome,
};
pub use synthetic::{
    default_behavior_names, gen_synthetic, manifest_path, Manifest, SyntheticData, SyntheticSpec,
};

/// One `(user, item, behavior, timestamp)` record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub user_id: u32,
    pub item_id: u32,
    pub behavior_id: u32,
    pub timestamp: u64,
}

/// Vocabulary sizes plus the two reserved tokens.
///
/// Item ids live in `[0, num_items)` and behavior ids in `[0, num_behaviors)`.
/// The pad and mask tokens are shared between both streams and sit just past
/// the larger vocabulary, so a token is unambiguous in either stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub num_items: usize,
    pub num_behaviors: usize,
}

impl Vocab {
    pub fn new(num_items: usize, num_behaviors: usize) -> Self {
        assert!(num_items > 0 && num_behaviors > 0);
        Self {
            num_items,
            num_behaviors,
        }
    }

    pub fn pad_token(&self) -> u32 {
        self.num_items.max(self.num_behaviors) as u32
    }

    pub fn mask_token(&self) -> u32 {
        self.pad_token() + 1
    }

    /// Row of the item embedding table (`num_items + 2` rows: items, pad, mask).
    pub fn item_row(&self, token: u32) -> Option<usize> {
        if (token as usize) < self.num_items {
            Some(token as usize)
        } else if token == self.pad_token() {
            Some(self.num_items)
        } else if token == self.mask_token() {
            Some(self.num_items + 1)
        } else {
            None
        }
    }

    /// Row of the behavior embedding table (`num_behaviors + 2` rows).
    pub fn behavior_row(&self, token: u32) -> Option<usize> {
        if (token as usize) < self.num_behaviors {
            Some(token as usize)
        } else if token == self.pad_token() {
            Some(self.num_behaviors)
        } else if token == self.mask_token() {
            Some(self.num_behaviors + 1)
        } else {
            None
        }
    }
}
