//! Whitespace-delimited text formats for features, edges, outfits, and
//! fill-in-the-blank questions.
//!
//! - features: header line `N F`, then `N` rows of `F` decimal reals.
//!   Values are written with 17 significant digits, so save/load round trips
//!   are bit-exact.
//! - edges: one `i j` pair per line; `#` comment lines and blank lines skip.
//! - outfits: one `label item item ...` record per line, label 1 (valid) or
//!   0 (invalid).
//! - questions: `answer_index | partial items | choice items`.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::eval::{FitbQuestion, Outfit};
use crate::numeric::Matrix;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("malformed header: {reason}")]
    MalformedHeader { reason: String },
    #[error("line {line}: row has {found} values, expected {expected}")]
    RowLengthMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: token {token:?} is not a valid finite number")]
    NonNumericToken { line: usize, token: String },
    #[error("line {line}: negative id {token}")]
    NegativeId { line: usize, token: String },
    #[error("line {line}: label must be 1 or 0, got {token:?}")]
    BadLabel { line: usize, token: String },
    #[error("line {line}: duplicate item {item}")]
    DuplicateItem { line: usize, item: usize },
    #[error("line {line}: answer index {answer} out of range for {num_choices} choices")]
    AnswerOutOfRange {
        line: usize,
        answer: usize,
        num_choices: usize,
    },
    #[error("line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_id(token: &str, line: usize) -> Result<usize, TextError> {
    match token.parse::<i64>() {
        Ok(v) if v < 0 => Err(TextError::NegativeId {
            line,
            token: token.to_string(),
        }),
        Ok(v) => Ok(v as usize),
        Err(_) => Err(TextError::NonNumericToken {
            line,
            token: token.to_string(),
        }),
    }
}

fn parse_real(token: &str, line: usize) -> Result<f64, TextError> {
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(TextError::NonNumericToken {
            line,
            token: token.to_string(),
        }),
    }
}

/// Loads a feature matrix.
pub fn load_features(path: impl AsRef<Path>) -> Result<Matrix, TextError> {
    let content = fs::read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| TextError::MalformedHeader {
        reason: "empty file".to_string(),
    })?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 2 {
        return Err(TextError::MalformedHeader {
            reason: format!("expected `N F`, got {header:?}"),
        });
    }
    let rows = parse_id(tokens[0], 1).map_err(|_| TextError::MalformedHeader {
        reason: format!("bad row count {:?}", tokens[0]),
    })?;
    let cols = parse_id(tokens[1], 1).map_err(|_| TextError::MalformedHeader {
        reason: format!("bad column count {:?}", tokens[1]),
    })?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        if seen == rows {
            return Err(TextError::MalformedRecord {
                line,
                reason: format!("more than {rows} data rows"),
            });
        }
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.len() != cols {
            return Err(TextError::RowLengthMismatch {
                line,
                expected: cols,
                found: tokens.len(),
            });
        }
        for token in tokens {
            data.push(parse_real(token, line)?);
        }
        seen += 1;
    }
    if seen != rows {
        return Err(TextError::MalformedRecord {
            line: content.lines().count(),
            reason: format!("expected {rows} data rows, found {seen}"),
        });
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

/// Writes a feature matrix losslessly (17 significant digits per value).
pub fn save_features(m: &Matrix, path: impl AsRef<Path>) -> Result<(), TextError> {
    let mut out = String::new();
    out.push_str(&format!("{} {}\n", m.rows(), m.cols()));
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads an edge list; `#` comments and blank lines are skipped. Duplicates
/// and reversed pairs are preserved (graph construction canonicalizes).
pub fn load_edges(path: impl AsRef<Path>) -> Result<Vec<(usize, usize)>, TextError> {
    let content = fs::read_to_string(path)?;
    let mut edges = Vec::new();
    for (idx, raw) in content.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(TextError::MalformedRecord {
                line,
                reason: format!("expected `i j`, got {} tokens", tokens.len()),
            });
        }
        edges.push((parse_id(tokens[0], line)?, parse_id(tokens[1], line)?));
    }
    Ok(edges)
}

pub fn save_edges(edges: &[(usize, usize)], path: impl AsRef<Path>) -> Result<(), TextError> {
    let mut out = String::new();
    for (i, j) in edges {
        out.push_str(&format!("{i} {j}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads labelled outfits: `label item item ...` with label 1 or 0.
pub fn load_outfits(path: impl AsRef<Path>) -> Result<Vec<Outfit>, TextError> {
    let content = fs::read_to_string(path)?;
    let mut outfits = Vec::new();
    for (idx, raw) in content.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let label = tokens.next().expect("non-empty line has a token");
        let valid = match label {
            "1" => true,
            "0" => false,
            other => {
                return Err(TextError::BadLabel {
                    line,
                    token: other.to_string(),
                })
            }
        };
        let mut items = Vec::new();
        for token in tokens {
            let item = parse_id(token, line)?;
            if items.contains(&item) {
                return Err(TextError::DuplicateItem { line, item });
            }
            items.push(item);
        }
        if items.len() < 2 {
            return Err(TextError::MalformedRecord {
                line,
                reason: format!("an outfit needs at least 2 items, got {}", items.len()),
            });
        }
        outfits.push(Outfit { items, valid });
    }
    Ok(outfits)
}

pub fn save_outfits(outfits: &[Outfit], path: impl AsRef<Path>) -> Result<(), TextError> {
    let mut out = String::new();
    for outfit in outfits {
        out.push_str(if outfit.valid { "1" } else { "0" });
        for item in &outfit.items {
            out.push_str(&format!(" {item}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads questions: `answer_index | partial items | choice items`.
pub fn load_questions(path: impl AsRef<Path>) -> Result<Vec<FitbQuestion>, TextError> {
    let content = fs::read_to_string(path)?;
    let mut questions = Vec::new();
    for (idx, raw) in content.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = trimmed.split('|').collect();
        if parts.len() != 3 {
            return Err(TextError::MalformedRecord {
                line,
                reason: format!(
                    "expected `answer | partial | choices`, got {} sections",
                    parts.len()
                ),
            });
        }
        let answer_token = parts[0].trim();
        let answer_index = parse_id(answer_token, line)?;
        let partial: Vec<usize> = parts[1]
            .split_whitespace()
            .map(|t| parse_id(t, line))
            .collect::<Result<_, _>>()?;
        if partial.is_empty() {
            return Err(TextError::MalformedRecord {
                line,
                reason: "partial outfit is empty".to_string(),
            });
        }
        let mut choices = Vec::new();
        for token in parts[2].split_whitespace() {
            let item = parse_id(token, line)?;
            if choices.contains(&item) {
                return Err(TextError::DuplicateItem { line, item });
            }
            choices.push(item);
        }
        if choices.len() < 2 {
            return Err(TextError::MalformedRecord {
                line,
                reason: format!("need at least 2 choices, got {}", choices.len()),
            });
        }
        if answer_index >= choices.len() {
            return Err(TextError::AnswerOutOfRange {
                line,
                answer: answer_index,
                num_choices: choices.len(),
            });
        }
        questions.push(FitbQuestion {
            partial,
            choices,
            answer_index,
        });
    }
    Ok(questions)
}

pub fn save_questions(questions: &[FitbQuestion], path: impl AsRef<Path>) -> Result<(), TextError> {
    let mut out = String::new();
    for q in questions {
        let partial: Vec<String> = q.partial.iter().map(usize::to_string).collect();
        let choices: Vec<String> = q.choices.iter().map(usize::to_string).collect();
        out.push_str(&format!(
            "{} | {} | {}\n",
            q.answer_index,
            partial.join(" "),
            choices.join(" ")
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use tempfile::tempdir;

    #[test]
    fn features_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("features.txt");
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let m = Matrix::from_vec(7, 5, (0..35).map(|_| rng.gen_range(-10.0..10.0)).collect());
        save_features(&m, &path).unwrap();
        let loaded = load_features(&path).unwrap();
        assert_eq!(m.as_slice(), loaded.as_slice());
    }

    #[test]
    fn row_length_mismatch_is_caught() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        fs::write(&path, "2 3\n1 2 3\n1 2 3 4\n").unwrap();
        assert!(matches!(
            load_features(&path),
            Err(TextError::RowLengthMismatch {
                line: 3,
                expected: 3,
                found: 4
            })
        ));
    }

    #[test]
    fn empty_features_file_is_malformed_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        fs::write(&path, "").unwrap();
        assert!(matches!(
            load_features(&path),
            Err(TextError::MalformedHeader { .. })
        ));
    }

    #[test]
    fn non_numeric_feature_is_caught() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.txt");
        fs::write(&path, "1 2\n0.5 oops\n").unwrap();
        assert!(matches!(
            load_features(&path),
            Err(TextError::NonNumericToken { line: 2, .. })
        ));
    }

    #[test]
    fn edges_parse_with_comments_and_blanks() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("edges.txt");
        fs::write(&path, "# header comment\n0 1\n\n1 2\n").unwrap();
        assert_eq!(load_edges(&path).unwrap(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn comment_only_edge_file_is_empty() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("edges.txt");
        fs::write(&path, "# nothing here\n").unwrap();
        assert!(load_edges(&path).unwrap().is_empty());
    }

    #[test]
    fn bad_edge_token_reports_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("edges.txt");
        fs::write(&path, "0 x\n").unwrap();
        match load_edges(&path) {
            Err(TextError::NonNumericToken { line, token }) => {
                assert_eq!(line, 1);
                assert_eq!(token, "x");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_edge_id_is_caught() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("edges.txt");
        fs::write(&path, "0 -3\n").unwrap();
        assert!(matches!(
            load_edges(&path),
            Err(TextError::NegativeId { line: 1, .. })
        ));
    }

    #[test]
    fn outfits_parse_and_validate() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("outfits.txt");
        fs::write(&path, "1 4 7 9\n0 1 2\n").unwrap();
        let outfits = load_outfits(&path).unwrap();
        assert_eq!(outfits.len(), 2);
        assert!(outfits[0].valid);
        assert_eq!(outfits[0].items, vec![4, 7, 9]);
        assert!(!outfits[1].valid);
    }

    #[test]
    fn bad_outfit_label_is_caught() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("outfits.txt");
        fs::write(&path, "2 1 2\n").unwrap();
        assert!(matches!(
            load_outfits(&path),
            Err(TextError::BadLabel { line: 1, .. })
        ));
    }

    #[test]
    fn duplicate_outfit_item_is_caught() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("outfits.txt");
        fs::write(&path, "1 3 3\n").unwrap();
        assert!(matches!(
            load_outfits(&path),
            Err(TextError::DuplicateItem { line: 1, item: 3 })
        ));
    }

    #[test]
    fn questions_parse_by_sections() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("questions.txt");
        fs::write(&path, "0 | 1 2 | 5 6 7 8\n").unwrap();
        let questions = load_questions(&path).unwrap();
        assert_eq!(questions[0].partial, vec![1, 2]);
        assert_eq!(questions[0].choices, vec![5, 6, 7, 8]);
        assert_eq!(questions[0].answer_index, 0);
    }

    #[test]
    fn answer_out_of_range_is_caught() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("questions.txt");
        fs::write(&path, "9 | 1 2 | 5 6 7 8\n").unwrap();
        assert!(matches!(
            load_questions(&path),
            Err(TextError::AnswerOutOfRange {
                line: 1,
                answer: 9,
                num_choices: 4
            })
        ));
    }

    #[test]
    fn outfit_and_question_round_trips() {
        let dir = tempdir().unwrap();
        let outfits = vec![
            Outfit {
                items: vec![0, 5, 9],
                valid: true,
            },
            Outfit {
                items: vec![2, 3],
                valid: false,
            },
        ];
        let path = dir.path().join("o.txt");
        save_outfits(&outfits, &path).unwrap();
        assert_eq!(load_outfits(&path).unwrap(), outfits);

        let questions = vec![FitbQuestion {
            partial: vec![1, 2, 3],
            choices: vec![9, 8, 7, 6],
            answer_index: 2,
        }];
        let qpath = dir.path().join("q.txt");
        save_questions(&questions, &qpath).unwrap();
        assert_eq!(load_questions(&qpath).unwrap(), questions);
    }
}
