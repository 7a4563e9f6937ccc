//! Top-k accuracy, confusion matrices and word-level edit error counts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rank of `label` among classes ordered by descending probability; ties go
/// to the lower class index.
fn rank_of(probs: &[f32], label: usize) -> usize {
    let p = probs[label];
    probs
        .iter()
        .enumerate()
        .filter(|&(i, &q)| q > p || (q == p && i < label))
        .count()
}

pub fn in_top_k(probs: &[f32], label: usize, k: usize) -> bool {
    rank_of(probs, label) < k
}

/// Index of the largest probability, lowest index on ties.
pub fn argmax(probs: &[f32]) -> usize {
    probs
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bp), (i, &p)| {
            if p > bp {
                (i, p)
            } else {
                (bi, bp)
            }
        })
        .0
}

pub fn topk_accuracy(probs_list: &[Vec<f32>], labels: &[usize], k: usize) -> Result<f64> {
    if probs_list.is_empty() {
        return Err(Error::Argument("top-k accuracy of an empty set".into()));
    }
    if probs_list.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions but {} labels",
            probs_list.len(),
            labels.len()
        )));
    }
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let mut hits = 0usize;
    for (p, &l) in probs_list.iter().zip(labels) {
        if l >= p.len() {
            return Err(Error::Argument(format!("label {l} out of range")));
        }
        hits += in_top_k(p, l, k) as usize;
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// `K x K` counts indexed `[true][predicted]`.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    if preds.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= k || l >= k {
            return Err(Error::Argument(format!(
                "class index out of range for {k} classes: label {l}, prediction {p}"
            )));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
}

impl ErrorCounts {
    pub fn total(&self) -> usize {
        self.insertions + self.deletions + self.substitutions
    }
}

/// Unit-cost Levenshtein distance table, `(|ref|+1) x (|hyp|+1)`.
fn distance_table<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<Vec<usize>> {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d
}

pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    distance_table(reference, hypothesis)[reference.len()][hypothesis.len()]
}

/// Insertion/deletion/substitution counts of a minimal alignment. The
/// backtrace prefers match, then substitution, deletion, insertion.
pub fn edit_errors<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> ErrorCounts {
    let d = distance_table(reference, hypothesis);
    let (mut i, mut j) = (reference.len(), hypothesis.len());
    let mut c = ErrorCounts::default();
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if same && d[i][j] == d[i - 1][j - 1] {
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && d[i][j] == d[i - 1][j - 1] + 1 {
                c.substitutions += 1;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRow {
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
    pub words: usize,
    pub mean_confidence: f64,
    pub errors: ErrorCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceReport {
    pub rows: Vec<SentenceRow>,
    pub average_mean_confidence: f64,
    pub average_total_errors: f64,
}

/// One decoded sentence: hypothesis words and the mean confidence of accepted words.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedSentence {
    pub words: Vec<String>,
    pub mean_confidence: f64,
}

pub fn sentence_report(
    decodes: &[DecodedSentence],
    references: &[Vec<String>],
) -> Result<SentenceReport> {
    if decodes.len() != references.len() {
        return Err(Error::Argument(format!(
            "{} decodes but {} references",
            decodes.len(),
            references.len()
        )));
    }
    let rows: Vec<SentenceRow> = decodes
        .iter()
        .zip(references)
        .map(|(d, r)| SentenceRow {
            reference: r.clone(),
            hypothesis: d.words.clone(),
            words: r.len(),
            mean_confidence: d.mean_confidence,
            errors: edit_errors(r, &d.words),
        })
        .collect();
    let n = rows.len().max(1) as f64;
    Ok(SentenceReport {
        average_mean_confidence: rows.iter().map(|r| r.mean_confidence).sum::<f64>() / n,
        average_total_errors: rows.iter().map(|r| r.errors.total() as f64).sum::<f64>() / n,
        rows,
    })
}

impl SentenceReport {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>3}  {:>5}  {:>9}  {:>3} {:>3} {:>3}  reference -> hypothesis",
            "#", "words", "mean conf", "I", "D", "S"
        );
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:>3}  {:>5}  {:>9.3}  {:>3} {:>3} {:>3}  {} -> {}",
                i + 1,
                r.words,
                r.mean_confidence,
                r.errors.insertions,
                r.errors.deletions,
                r.errors.substitutions,
                r.reference.join(" "),
                r.hypothesis.join(" ")
            );
        }
        let _ = writeln!(
            out,
            "average mean confidence {:.3}, average total errors {:.2}",
            self.average_mean_confidence, self.average_total_errors
        );
        out
    }
}
