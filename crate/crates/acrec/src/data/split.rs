use crate::data::{InteractionSequence, Role, SplitExample, Vocabulary, PAD_ID};

/// Leave-one-out split over every sequence of length >= 3: the last item is
/// the test target, the second-last the validation target, and every prefix
/// of the remaining items becomes a training pair. Shorter sequences cannot
/// fill all three roles and are dropped.
#[derive(Clone, Debug, Default)]
pub struct SplitSet {
    pub train: Vec<SplitExample>,
    pub valid: Vec<SplitExample>,
    pub test: Vec<SplitExample>,
}

impl SplitSet {
    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.valid.is_empty() && self.test.is_empty()
    }
}

pub fn leave_one_out_split(sequences: &[InteractionSequence], vocab: &Vocabulary) -> SplitSet {
    let mut out = SplitSet::default();
    for seq in sequences {
        let len = seq.items.len();
        if len < 3 {
            continue;
        }
        let user = vocab
            .user_dense(&seq.user_id)
            .expect("sequence user must be in vocabulary");
        let train_len = len - 2;
        for k in 1..train_len {
            out.train.push(SplitExample {
                user,
                context: seq.items[..k].to_vec(),
                target: seq.items[k],
                role: Role::Train,
            });
        }
        out.valid.push(SplitExample {
            user,
            context: seq.items[..len - 2].to_vec(),
            target: seq.items[len - 2],
            role: Role::Valid,
        });
        out.test.push(SplitExample {
            user,
            context: seq.items[..len - 1].to_vec(),
            target: seq.items[len - 1],
            role: Role::Test,
        });
    }
    out
}

/// Keep the most recent `n` items, left-padding shorter contexts with the
/// padding id. Returns the fixed-length row and its validity mask.
pub fn pad_truncate(context: &[u32], n: usize) -> (Vec<u32>, Vec<bool>) {
    assert!(n >= 1, "pad_truncate needs n >= 1");
    let mut ids = vec![PAD_ID; n];
    let mut mask = vec![false; n];
    let take = context.len().min(n);
    let src = &context[context.len() - take..];
    for (k, &item) in src.iter().enumerate() {
        ids[n - take + k] = item;
        mask[n - take + k] = true;
    }
    (ids, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load::parse_interactions;

    fn split_of(text: &str) -> (SplitSet, Vec<InteractionSequence>) {
        let (seqs, vocab) = parse_interactions(text).unwrap();
        (leave_one_out_split(&seqs, &vocab), seqs)
    }

    #[test]
    fn four_item_sequence_fills_all_roles() {
        let (split, _) = split_of("u a b c d\n");
        assert_eq!(split.test.len(), 1);
        assert_eq!(split.test[0].context, [1, 2, 3]);
        assert_eq!(split.test[0].target, 4);
        assert_eq!(split.valid[0].context, [1, 2]);
        assert_eq!(split.valid[0].target, 3);
        assert_eq!(split.train.len(), 1);
        assert_eq!(split.train[0].context, [1]);
        assert_eq!(split.train[0].target, 2);
    }

    #[test]
    fn two_item_sequence_is_dropped() {
        let (split, _) = split_of("u a b\n");
        assert!(split.is_empty());
    }

    #[test]
    fn prefix_expansion_enumerates_all_prefixes() {
        // [a,b,c,d,e]: training sequence [a,b,c] gives ([a],b) and ([a,b],c).
        let (split, _) = split_of("u a b c d e\n");
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.train[0].context, [1]);
        assert_eq!(split.train[0].target, 2);
        assert_eq!(split.train[1].context, [1, 2]);
        assert_eq!(split.train[1].target, 3);
    }

    #[test]
    fn split_partitions_every_position() {
        // Each position of a surviving sequence is owned by exactly one
        // role: the training sequence covers [0, len-2), validation holds
        // len-2 and test holds len-1.
        let (split, seqs) = split_of("u a b c d e f\nv b c d a\n");
        for (idx, seq) in seqs.iter().enumerate() {
            let uid = idx as u32 + 1;
            let len = seq.items.len();
            let tests: Vec<_> = split.test.iter().filter(|e| e.user == uid).collect();
            let valids: Vec<_> = split.valid.iter().filter(|e| e.user == uid).collect();
            let trains: Vec<_> = split.train.iter().filter(|e| e.user == uid).collect();
            assert_eq!(tests.len(), 1);
            assert_eq!(valids.len(), 1);
            assert_eq!(trains.len(), len - 3);
            assert_eq!(tests[0].context, seq.items[..len - 1]);
            assert_eq!(tests[0].target, seq.items[len - 1]);
            assert_eq!(valids[0].context, seq.items[..len - 2]);
            assert_eq!(valids[0].target, seq.items[len - 2]);
            for (k, pair) in trains.iter().enumerate() {
                assert_eq!(pair.context, seq.items[..k + 1]);
                assert_eq!(pair.target, seq.items[k + 1]);
            }
            // The longest training pair plus the two held-out targets cover
            // all positions exactly once.
            let covered = (len - 3) + 1 /* longest train ctx+target */ + 2;
            assert_eq!(covered, len);
        }
    }

    #[test]
    fn pad_truncate_left_pads() {
        let (ids, mask) = pad_truncate(&[5, 9, 2], 5);
        assert_eq!(ids, [0, 0, 5, 9, 2]);
        assert_eq!(mask, [false, false, true, true, true]);
    }

    #[test]
    fn pad_truncate_keeps_most_recent() {
        let (ids, mask) = pad_truncate(&[1, 2, 3, 4, 5, 6, 7], 5);
        assert_eq!(ids, [3, 4, 5, 6, 7]);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn pad_truncate_identity_when_exact() {
        let (ids, mask) = pad_truncate(&[7], 1);
        assert_eq!(ids, [7]);
        assert_eq!(mask, [true]);
    }

    #[test]
    fn mask_is_always_a_true_suffix() {
        for len in 1..9 {
            for n in 1..9 {
                let ctx: Vec<u32> = (1..=len as u32).collect();
                let (_, mask) = pad_truncate(&ctx, n);
                let first_true = mask.iter().position(|&m| m).unwrap();
                assert!(mask[first_true..].iter().all(|&m| m), "len {len} n {n}");
            }
        }
    }
}
