//! Ingestion, k-core filtering, leave-one-out splitting and batching.

mod batch;
mod files;
mod kcore;
mod load;
mod split;

pub use batch::{batch, SequenceBatch};
pub use files::{read_splits, write_splits, write_vocabulary, DatasetSummary, SplitFiles};
pub use kcore::kcore_filter;
pub use load::load_interactions;
pub use split::{leave_one_out_split, pad_truncate, SplitSet};

use std::collections::HashMap;

/// Padding id; never a valid item.
pub const PAD_ID: u32 = 0;

/// One user's chronological item history with dense item ids (1-based).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user_id: String,
    pub items: Vec<u32>,
}

/// Bidirectional raw/dense id maps. Dense item ids are 1..=item_count with 0
/// reserved for padding; dense user ids are 1..=user_count.
#[derive(Clone, Debug, Default)]
pub struct Vocabulary {
    item_to_dense: HashMap<String, u32>,
    dense_to_item: Vec<String>,
    user_to_dense: HashMap<String, u32>,
    dense_to_user: Vec<String>,
}

impl Vocabulary {
    pub fn item_count(&self) -> usize {
        self.dense_to_item.len()
    }

    pub fn user_count(&self) -> usize {
        self.dense_to_user.len()
    }

    /// Dense id for a raw item, inserting on first appearance.
    pub fn intern_item(&mut self, raw: &str) -> u32 {
        if let Some(&id) = self.item_to_dense.get(raw) {
            return id;
        }
        self.dense_to_item.push(raw.to_string());
        let id = self.dense_to_item.len() as u32;
        self.item_to_dense.insert(raw.to_string(), id);
        id
    }

    pub fn intern_user(&mut self, raw: &str) -> u32 {
        if let Some(&id) = self.user_to_dense.get(raw) {
            return id;
        }
        self.dense_to_user.push(raw.to_string());
        let id = self.dense_to_user.len() as u32;
        self.user_to_dense.insert(raw.to_string(), id);
        id
    }

    pub fn item_dense(&self, raw: &str) -> Option<u32> {
        self.item_to_dense.get(raw).copied()
    }

    pub fn user_dense(&self, raw: &str) -> Option<u32> {
        self.user_to_dense.get(raw).copied()
    }

    /// Raw string for a dense item id (1-based).
    pub fn item_raw(&self, dense: u32) -> Option<&str> {
        self.dense_to_item.get(dense as usize - 1).map(|s| s.as_str())
    }

    pub fn user_raw(&self, dense: u32) -> Option<&str> {
        self.dense_to_user.get(dense as usize - 1).map(|s| s.as_str())
    }

    pub fn items(&self) -> impl Iterator<Item = (&str, u32)> {
        self.dense_to_item
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32 + 1))
    }

    pub fn users(&self) -> impl Iterator<Item = (&str, u32)> {
        self.dense_to_user
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32 + 1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Train,
    Valid,
    Test,
}

/// One supervised example: context items and the next item to predict.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitExample {
    pub user: u32,
    pub context: Vec<u32>,
    pub target: u32,
    pub role: Role,
}
