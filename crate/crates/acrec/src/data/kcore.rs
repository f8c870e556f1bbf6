use std::collections::HashMap;

use crate::data::{InteractionSequence, Vocabulary};
use crate::error::DataError;

/// Iterative k-core filter: drop items occurring fewer than `min_count`
/// times, then users left with fewer than `min_count` interactions, and
/// repeat until nothing changes. Surviving ids are re-densified contiguously
/// in first-appearance order.
pub fn kcore_filter(
    sequences: &[InteractionSequence],
    vocab: &Vocabulary,
    min_count: usize,
) -> Result<(Vec<InteractionSequence>, Vocabulary), DataError> {
    assert!(min_count >= 1, "min_count must be >= 1");
    let mut current: Vec<InteractionSequence> = sequences.to_vec();

    loop {
        let mut item_counts: HashMap<u32, usize> = HashMap::new();
        for seq in &current {
            for &item in &seq.items {
                *item_counts.entry(item).or_insert(0) += 1;
            }
        }
        let mut changed = false;
        let mut next: Vec<InteractionSequence> = Vec::with_capacity(current.len());
        for seq in &current {
            let kept: Vec<u32> = seq
                .items
                .iter()
                .copied()
                .filter(|item| item_counts[item] >= min_count)
                .collect();
            if kept.len() != seq.items.len() {
                changed = true;
            }
            if kept.len() >= min_count {
                next.push(InteractionSequence {
                    user_id: seq.user_id.clone(),
                    items: kept,
                });
            } else {
                changed = true;
            }
        }
        current = next;
        if !changed {
            break;
        }
    }

    if current.is_empty() {
        return Err(DataError::EmptyAfterKCore(min_count));
    }

    // Remap to contiguous dense ids.
    let mut new_vocab = Vocabulary::default();
    let mut remapped = Vec::with_capacity(current.len());
    for seq in &current {
        new_vocab.intern_user(&seq.user_id);
        let items = seq
            .items
            .iter()
            .map(|&old| new_vocab.intern_item(vocab.item_raw(old).expect("dense id in vocab")))
            .collect();
        remapped.push(InteractionSequence {
            user_id: seq.user_id.clone(),
            items,
        });
    }
    Ok((remapped, new_vocab))
}
