use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::split::pad_truncate;
use crate::data::SplitExample;

/// Fixed-length padded batch. `ids` and `valid_mask` are row-major
/// `[rows, n]`; padding always precedes real items within a row.
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    pub ids: Vec<u32>,
    pub valid_mask: Vec<bool>,
    pub targets: Vec<u32>,
    pub rows: usize,
    pub n: usize,
}

impl SequenceBatch {
    pub fn from_examples(examples: &[&SplitExample], n: usize) -> Self {
        let rows = examples.len();
        let mut ids = Vec::with_capacity(rows * n);
        let mut valid_mask = Vec::with_capacity(rows * n);
        let mut targets = Vec::with_capacity(rows);
        for ex in examples {
            let (row, mask) = pad_truncate(&ex.context, n);
            ids.extend(row);
            valid_mask.extend(mask);
            targets.push(ex.target);
        }
        SequenceBatch {
            ids,
            valid_mask,
            targets,
            rows,
            n,
        }
    }
}

/// Deterministically shuffled batches; the final partial batch is kept.
pub fn batch(examples: &[SplitExample], n: usize, batch_size: usize, seed: u64) -> Vec<SequenceBatch> {
    assert!(batch_size >= 1, "batch size must be >= 1");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&SplitExample> = chunk.iter().map(|&i| &examples[i]).collect();
            SequenceBatch::from_examples(&refs, n)
        })
        .collect()
}
