//! Three-stage training (autoencoder, latent diffusion, decoder fine-tuning)
//! and guided next-item inference.

mod checkpoint;
mod infer;
mod stages;

pub use checkpoint::{read_blob, write_blob, Checkpoint, BLOB_FILE, MANIFEST_FILE};
pub use infer::{
    agnostic_latents, infer_next_item, rank_items, rank_of, sample_specific, score_baseline, score_splits,
    Inference,
};
pub use stages::{
    draw_diffusion_inputs, latent_pairs, stage1_pretrain, stage2_train_ldm, stage3_examples, stage3_finetune,
    train_all, LatentPairs, Stage3Examples, TrainedRun,
};

use std::fmt::Write as _;

use crate::config::DataConfig;
use crate::data::{
    build_sequences, filter_min_interactions, next_item_split, split_last, DatasetHeader, NextItemSplit, Sequence,
    UserHistory, Vocab,
};
use crate::error::{Error, Result};

/// Training sequences and held-out test triples of one dataset.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub header: DatasetHeader,
    pub vocab: Vocab,
    pub seq_len: usize,
    /// Every user's history without the held-out last interaction.
    pub train: Vec<Sequence>,
    pub tests: Vec<NextItemSplit>,
    /// Users without a test triple (fewer than two interactions).
    pub skipped: usize,
}

/// Each user's interactions without the last one; users left empty are dropped.
pub fn training_histories(users: &[UserHistory]) -> Vec<UserHistory> {
    users
        .iter()
        .filter_map(|u| {
            let (rest, _) = split_last(u)?;
            (!rest.is_empty()).then(|| UserHistory {
                user_id: u.user_id,
                interactions: rest,
            })
        })
        .collect()
}

impl PreparedData {
    pub fn new(header: &DatasetHeader, users: &[UserHistory], cfg: &DataConfig) -> Result<Self> {
        Self::with_training(header, users, None, cfg)
    }

    /// Test triples always come from `users`; `train` replaces the default
    /// training histories when given.
    pub fn with_training(
        header: &DatasetHeader,
        users: &[UserHistory],
        train: Option<Vec<UserHistory>>,
        cfg: &DataConfig,
    ) -> Result<Self> {
        let vocab = header.vocab();
        let users = filter_min_interactions(users.to_vec(), cfg.min_interactions);
        if users.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let full = build_sequences(&users, cfg.seq_len, &vocab)?;
        let split = next_item_split(&full, &vocab);
        let train_users = match train {
            Some(t) => t.into_iter().filter(|u| !u.is_empty()).collect(),
            None => training_histories(&users),
        };
        if train_users.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            header: header.clone(),
            vocab,
            seq_len: cfg.seq_len,
            train: build_sequences(&train_users, cfg.seq_len, &vocab)?,
            tests: split.splits,
            skipped: split.skipped,
        })
    }
}

/// Per-epoch training record: `epoch loss metric…`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TrainLog {
    pub fn new(metrics: &[&str]) -> Self {
        let mut columns = vec!["epoch".to_string(), "loss".to_string()];
        columns.extend(metrics.iter().map(|m| m.to_string()));
        Self {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, epoch: usize, loss: f64, metrics: &[f64]) {
        assert_eq!(metrics.len() + 2, self.columns.len());
        let mut row = vec![epoch as f64, loss];
        row.extend_from_slice(metrics);
        self.rows.push(row);
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[1]).collect()
    }

    /// Values of one metric column, by name.
    pub fn metric(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {}\n", self.columns.join(" "));
        for r in &self.rows {
            let _ = write!(s, "{}", r[0] as usize);
            for v in &r[1..] {
                let _ = write!(s, " {v:.6}");
            }
            s.push('\n');
        }
        s
    }
}
