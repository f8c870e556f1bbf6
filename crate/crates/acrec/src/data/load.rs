use std::path::Path;

use crate::data::{InteractionSequence, Vocabulary};
use crate::error::DataError;

/// Parse an interaction log into per-user chronological sequences.
///
/// Two layouts are autodetected by column count:
/// * triplets — every line is `user item timestamp`; rows are stably sorted
///   by timestamp per user (input order breaks ties);
/// * grouped — each line is `user item item ...`, already in order.
///
/// Dense ids are assigned in first-appearance order.
pub fn load_interactions(path: &Path) -> Result<(Vec<InteractionSequence>, Vocabulary), DataError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DataError::Io(path.display().to_string(), e))?;
    parse_interactions(&text)
}

pub(crate) fn parse_interactions(
    text: &str,
) -> Result<(Vec<InteractionSequence>, Vocabulary), DataError> {
    let lines: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, cols)| !cols.is_empty())
        .collect();
    if lines.is_empty() {
        return Err(DataError::Empty);
    }

    let triplet = lines.iter().all(|(_, cols)| cols.len() == 3);
    let mut vocab = Vocabulary::default();
    // user dense id -> (raw order index, [(timestamp, input order, item raw)])
    let mut per_user: Vec<Vec<(f64, usize, String)>> = Vec::new();

    if triplet {
        for (order, (line_no, cols)) in lines.iter().enumerate() {
            let ts: f64 = cols[2].parse().map_err(|_| DataError::Malformed {
                line: *line_no,
                reason: format!("timestamp '{}' is not a number", cols[2]),
            })?;
            let uid = vocab.intern_user(cols[0]) as usize - 1;
            if per_user.len() <= uid {
                per_user.resize_with(uid + 1, Vec::new);
            }
            per_user[uid].push((ts, order, cols[1].to_string()));
        }
    } else {
        for (line_no, cols) in &lines {
            if cols.len() < 2 {
                return Err(DataError::Malformed {
                    line: *line_no,
                    reason: "expected `user item ...` or `user item timestamp`".to_string(),
                });
            }
            let uid = vocab.intern_user(cols[0]) as usize - 1;
            if per_user.len() <= uid {
                per_user.resize_with(uid + 1, Vec::new);
            }
            let base = per_user[uid].len();
            for (k, item) in cols[1..].iter().enumerate() {
                per_user[uid].push((0.0, base + k, item.to_string()));
            }
        }
    }

    let mut sequences = Vec::with_capacity(per_user.len());
    for (uid, mut events) in per_user.into_iter().enumerate() {
        // Stable by construction: ties keep input order via the second key.
        events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let items: Vec<u32> = events.iter().map(|(_, _, raw)| vocab.intern_item(raw)).collect();
        let user_id = vocab.user_raw(uid as u32 + 1).unwrap().to_string();
        sequences.push(InteractionSequence { user_id, items });
    }
    Ok((sequences, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorts_by_timestamp_with_stable_ties() {
        let text = "u1 a 3\nu1 b 1\nu1 c 2\n";
        let (seqs, vocab) = parse_interactions(text).unwrap();
        assert_eq!(seqs.len(), 1);
        let names: Vec<&str> = seqs[0]
            .items
            .iter()
            .map(|&i| vocab.item_raw(i).unwrap())
            .collect();
        assert_eq!(names, ["b", "c", "a"]);

        // Equal timestamps keep file order.
        let (seqs, vocab) = parse_interactions("u x 7\nu y 7\nu z 7\n").unwrap();
        let names: Vec<&str> = seqs[0]
            .items
            .iter()
            .map(|&i| vocab.item_raw(i).unwrap())
            .collect();
        assert_eq!(names, ["x", "y", "z"]);
    }

    #[test]
    fn empty_file_is_an_error() {
        let err = parse_interactions("").unwrap_err();
        assert!(matches!(err, DataError::Empty));
        assert_eq!(err.to_string(), "no interactions");
    }

    #[test]
    fn counts_distinct_items_on_fixture() {
        // Two users, four distinct items over six interactions, counted by
        // hand: i1, i2, i3, i4.
        let text = "u1 i1 1\nu1 i2 2\nu1 i3 3\nu2 i2 1\nu2 i4 2\nu2 i1 3\n";
        let (seqs, vocab) = parse_interactions(text).unwrap();
        assert_eq!(vocab.item_count(), 4);
        assert_eq!(vocab.user_count(), 2);
        assert_eq!(seqs.len(), 2);
        // First-appearance order: i1=1, i2=2, i3=3, i4=4.
        assert_eq!(vocab.item_dense("i1"), Some(1));
        assert_eq!(vocab.item_dense("i4"), Some(4));
    }

    #[test]
    fn grouped_format_autodetected() {
        // A 4-column line forces grouped mode.
        let text = "u1 a b c\nu2 b c\n";
        let (seqs, vocab) = parse_interactions(text).unwrap();
        assert_eq!(seqs[0].items.len(), 3);
        assert_eq!(seqs[1].items.len(), 2);
        assert_eq!(vocab.item_count(), 3);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_interactions("u1 a 1\nu1 b oops\n").unwrap_err();
        match err {
            DataError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
