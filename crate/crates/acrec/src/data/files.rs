//! On-disk dataset layout produced by preprocessing: one whitespace file per
//! split (`user ctx_1 .. ctx_k target`, dense ids), two-column vocabulary
//! files and a summary JSON.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Role, SplitExample, SplitSet, Vocabulary};
use crate::error::DataError;

pub struct SplitFiles {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

impl SplitFiles {
    pub fn in_dir(dir: &Path) -> Self {
        SplitFiles {
            train: dir.join("train.txt"),
            valid: dir.join("valid.txt"),
            test: dir.join("test.txt"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetSummary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: f64,
}

fn write_split_file(path: &Path, examples: &[SplitExample]) -> Result<(), DataError> {
    let mut text = String::new();
    for ex in examples {
        write!(text, "{}", ex.user).unwrap();
        for item in &ex.context {
            write!(text, " {item}").unwrap();
        }
        writeln!(text, " {}", ex.target).unwrap();
    }
    std::fs::write(path, text).map_err(|e| DataError::Io(path.display().to_string(), e))
}

pub fn write_splits(dir: &Path, split: &SplitSet) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io(dir.display().to_string(), e))?;
    let files = SplitFiles::in_dir(dir);
    write_split_file(&files.train, &split.train)?;
    write_split_file(&files.valid, &split.valid)?;
    write_split_file(&files.test, &split.test)
}

pub fn write_vocabulary(dir: &Path, vocab: &Vocabulary) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io(dir.display().to_string(), e))?;
    let mut items = String::new();
    for (raw, dense) in vocab.items() {
        writeln!(items, "{raw}\t{dense}").unwrap();
    }
    let path = dir.join("vocab_items.tsv");
    std::fs::write(&path, items).map_err(|e| DataError::Io(path.display().to_string(), e))?;
    let mut users = String::new();
    for (raw, dense) in vocab.users() {
        writeln!(users, "{raw}\t{dense}").unwrap();
    }
    let path = dir.join("vocab_users.tsv");
    std::fs::write(&path, users).map_err(|e| DataError::Io(path.display().to_string(), e))
}

fn read_split_file(path: &Path, role: Role) -> Result<Vec<SplitExample>, DataError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DataError::MissingSplit(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        if cols.len() < 3 {
            return Err(DataError::Malformed {
                line: line_no + 1,
                reason: "split lines need `user ctx.. target`".to_string(),
            });
        }
        let parse = |s: &str| -> Result<u32, DataError> {
            s.parse().map_err(|_| DataError::Malformed {
                line: line_no + 1,
                reason: format!("'{s}' is not a dense id"),
            })
        };
        let user = parse(cols[0])?;
        let mut ids = Vec::with_capacity(cols.len() - 1);
        for c in &cols[1..] {
            ids.push(parse(c)?);
        }
        let target = ids.pop().unwrap();
        out.push(SplitExample {
            user,
            context: ids,
            target,
            role,
        });
    }
    Ok(out)
}

/// Read the three split files back. `item_count` is derived from the
/// vocabulary file when present, else from the largest id seen.
pub fn read_splits(dir: &Path) -> Result<(SplitSet, usize), DataError> {
    let files = SplitFiles::in_dir(dir);
    let split = SplitSet {
        train: read_split_file(&files.train, Role::Train)?,
        valid: read_split_file(&files.valid, Role::Valid)?,
        test: read_split_file(&files.test, Role::Test)?,
    };
    let vocab_path = dir.join("vocab_items.tsv");
    let item_count = if vocab_path.exists() {
        let text = std::fs::read_to_string(&vocab_path)
            .map_err(|e| DataError::Io(vocab_path.display().to_string(), e))?;
        text.lines().filter(|l| !l.trim().is_empty()).count()
    } else {
        split
            .train
            .iter()
            .chain(&split.valid)
            .chain(&split.test)
            .flat_map(|e| e.context.iter().chain(std::iter::once(&e.target)))
            .copied()
            .max()
            .unwrap_or(0) as usize
    };
    Ok((split, item_count))
}

pub fn summarize(sequences: &[crate::data::InteractionSequence], vocab: &Vocabulary) -> DatasetSummary {
    let interactions: usize = sequences.iter().map(|s| s.items.len()).sum();
    let users = vocab.user_count();
    let items = vocab.item_count();
    let density = if users * items == 0 {
        0.0
    } else {
        interactions as f64 / (users as f64 * items as f64)
    };
    DatasetSummary {
        users,
        items,
        interactions,
        density,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load::parse_interactions;
    use crate::data::split::leave_one_out_split;

    #[test]
    fn split_files_round_trip() {
        let (seqs, vocab) = parse_interactions("u a b c d\nv b c d a e\n").unwrap();
        let split = leave_one_out_split(&seqs, &vocab);
        let dir = std::env::temp_dir().join(format!("acrec-files-{}", std::process::id()));
        write_splits(&dir, &split).unwrap();
        write_vocabulary(&dir, &vocab).unwrap();
        let (back, item_count) = read_splits(&dir).unwrap();
        assert_eq!(back.train, split.train);
        assert_eq!(back.valid, split.valid);
        assert_eq!(back.test, split.test);
        assert_eq!(item_count, vocab.item_count());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn summary_counts_match_hand_count() {
        let (seqs, vocab) = parse_interactions("u a b c\nv a b\n").unwrap();
        let s = summarize(&seqs, &vocab);
        assert_eq!(s.users, 2);
        assert_eq!(s.items, 3);
        assert_eq!(s.interactions, 5);
        assert!((s.density - 5.0 / 6.0).abs() < 1e-12);
    }
}
