//! Verification (1:1) and identification (1:N) scoring, train × test condition matrices
//! and degradation deltas.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{euclidean, EmbedError, EmbeddingVector};

#[derive(Error, Debug)]
pub enum RecogError {
    #[error("no trials to score")]
    Empty,
    #[error("gallery is empty")]
    EmptyGallery,
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error("condition matrix has no cell ({train}, {test})")]
    MissingCell { train: String, test: String },
    #[error("no fold results for cells: {}", .0.iter().map(|(a, b)| format!("({a}, {b})")).collect::<Vec<_>>().join(", "))]
    MissingCells(Vec<(String, String)>),
    #[error("accuracy {0} outside [0, 1]")]
    Accuracy(f64),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Match,
    NoMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    Same,
    Different,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTrial {
    pub subject_a: String,
    pub subject_b: String,
    pub decision: Decision,
    pub truth: Truth,
}

impl PairTrial {
    /// Truth is derived from the subject ids.
    pub fn new(subject_a: impl Into<String>, subject_b: impl Into<String>, decision: Decision) -> Self {
        let (subject_a, subject_b) = (subject_a.into(), subject_b.into());
        let truth = if subject_a == subject_b {
            Truth::Same
        } else {
            Truth::Different
        };
        Self {
            subject_a,
            subject_b,
            decision,
            truth,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_trials(trials: &[PairTrial]) -> Self {
        let mut c = Confusion::default();
        for t in trials {
            match (t.decision, t.truth) {
                (Decision::Match, Truth::Same) => c.tp += 1,
                (Decision::NoMatch, Truth::Different) => c.tn += 1,
                (Decision::Match, Truth::Different) => c.fp += 1,
                (Decision::NoMatch, Truth::Same) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// (TP + TN) / (TP + TN + FP + FN).
    pub fn accuracy(&self) -> Result<f64, RecogError> {
        match self.total() {
            0 => Err(RecogError::Empty),
            n => Ok((self.tp + self.tn) as f64 / n as f64),
        }
    }
}

pub fn accuracy(trials: &[PairTrial]) -> Result<f64, RecogError> {
    Confusion::from_trials(trials).accuracy()
}

/// Nearest gallery entry by Euclidean distance; ties go to the lowest gallery index.
pub fn identify_top1<'g, S>(
    probe: &EmbeddingVector,
    gallery: &'g [(S, EmbeddingVector)],
) -> Result<&'g S, RecogError> {
    let distances = gallery
        .iter()
        .map(|(_, g)| euclidean(probe, g))
        .collect::<Result<Vec<_>, _>>()?;
    let best = argmin(&distances).ok_or(RecogError::EmptyGallery)?;
    Ok(&gallery[best].0)
}

/// Index of the smallest value; first occurrence wins.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &d) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Rank-1 identification accuracy of `probes` (true subject, embedding) against `gallery`.
pub fn identification_accuracy<S: PartialEq>(
    probes: &[(S, EmbeddingVector)],
    gallery: &[(S, EmbeddingVector)],
) -> Result<f64, RecogError> {
    if probes.is_empty() {
        return Err(RecogError::Empty);
    }
    let mut correct = 0;
    for (truth, probe) in probes {
        if identify_top1(probe, gallery)? == truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / probes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub folds: usize,
}

/// Mean ± spread accuracy for every (train condition, test condition) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `cells[row][col]`.
    pub cells: Vec<Vec<Cell>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub train_cond: String,
    pub test_cond: String,
    pub fold: usize,
    pub accuracy: f64,
}

impl ConditionMatrix {
    /// Builds a matrix directly from `(mean, std)` pairs, row-major.
    pub fn from_values(
        rows: &[&str],
        cols: &[&str],
        values: &[&[(f64, f64)]],
    ) -> Result<Self, RecogError> {
        let mut cells = Vec::with_capacity(rows.len());
        for (r, _) in rows.iter().enumerate() {
            let row = values.get(r).copied().unwrap_or(&[]);
            let mut out = Vec::with_capacity(cols.len());
            for (c, col) in cols.iter().enumerate() {
                let &(mean, std) = row.get(c).ok_or_else(|| RecogError::MissingCell {
                    train: rows[r].to_string(),
                    test: col.to_string(),
                })?;
                if !(0.0..=1.0).contains(&mean) {
                    return Err(RecogError::Accuracy(mean));
                }
                out.push(Cell { mean, std, folds: 0 });
            }
            cells.push(out);
        }
        Ok(Self {
            rows: rows.iter().map(|s| s.to_string()).collect(),
            cols: cols.iter().map(|s| s.to_string()).collect(),
            cells,
        })
    }

    pub fn cell(&self, train: &str, test: &str) -> Result<&Cell, RecogError> {
        let missing = || RecogError::MissingCell {
            train: train.to_string(),
            test: test.to_string(),
        };
        let r = self.rows.iter().position(|x| x == train).ok_or_else(missing)?;
        let c = self.cols.iter().position(|x| x == test).ok_or_else(missing)?;
        Ok(&self.cells[r][c])
    }

    /// Aligned text table: one row per training condition, `mean ± std` per test condition.
    pub fn to_text_table(&self, title: &str) -> String {
        let label_w = self.rows.iter().map(|r| r.len()).max().unwrap_or(0).max(5);
        let cell_w = 17usize.max(self.cols.iter().map(|c| c.len()).max().unwrap_or(0));
        let mut out = String::new();
        let _ = writeln!(out, "{title}");
        let _ = write!(out, "{:>label_w$} |", "train");
        for c in &self.cols {
            let _ = write!(out, " {c:^cell_w$}");
        }
        out.push('\n');
        let _ = writeln!(out, "{}", "-".repeat(label_w + 2 + (cell_w + 1) * self.cols.len()));
        for (r, row) in self.rows.iter().zip(&self.cells) {
            let _ = write!(out, "{r:>label_w$} |");
            for cell in row {
                let text = format!("{:.4} ± {:.4}", cell.mean, cell.std);
                let _ = write!(out, " {text:^cell_w$}");
            }
            out.push('\n');
        }
        out
    }
}

/// Aggregates per-fold accuracies into a matrix with mean and population standard
/// deviation per cell. Every `(row, col)` combination needs at least one fold.
pub fn build_condition_matrix(
    results: &[FoldResult],
    rows: &[&str],
    cols: &[&str],
) -> Result<ConditionMatrix, RecogError> {
    let mut grouped: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for r in results {
        if !(0.0..=1.0).contains(&r.accuracy) {
            return Err(RecogError::Accuracy(r.accuracy));
        }
        grouped
            .entry((r.train_cond.as_str(), r.test_cond.as_str()))
            .or_default()
            .push(r.accuracy);
    }
    let missing: Vec<(String, String)> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .filter(|key| !grouped.contains_key(key))
        .map(|(r, c)| (r.to_string(), c.to_string()))
        .collect();
    if !missing.is_empty() {
        return Err(RecogError::MissingCells(missing));
    }
    let cells = rows
        .iter()
        .map(|&r| {
            cols.iter()
                .map(|&c| {
                    let xs = &grouped[&(r, c)];
                    let n = xs.len() as f64;
                    let mean = xs.iter().sum::<f64>() / n;
                    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                    Cell {
                        mean,
                        std: var.sqrt(),
                        folds: xs.len(),
                    }
                })
                .collect()
        })
        .collect();
    Ok(ConditionMatrix {
        rows: rows.iter().map(|s| s.to_string()).collect(),
        cols: cols.iter().map(|s| s.to_string()).collect(),
        cells,
    })
}

/// Baseline cell mean minus degraded cell mean, both within one matrix.
pub fn degradation_delta(
    matrix: &ConditionMatrix,
    baseline: (&str, &str),
    degraded: (&str, &str),
) -> Result<f64, RecogError> {
    delta_between(matrix, baseline, matrix, degraded)
}

/// Baseline cell mean of one matrix minus degraded cell mean of another.
pub fn delta_between(
    baseline_matrix: &ConditionMatrix,
    baseline: (&str, &str),
    degraded_matrix: &ConditionMatrix,
    degraded: (&str, &str),
) -> Result<f64, RecogError> {
    let b = baseline_matrix.cell(baseline.0, baseline.1)?.mean;
    let d = degraded_matrix.cell(degraded.0, degraded.1)?.mean;
    Ok(b - d)
}

/// Reads `train_cond,test_cond,fold,accuracy` rows.
pub fn fold_results_from_csv(text: &str, origin: &str) -> Result<Vec<FoldResult>, RecogError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let fail = |e: csv::Error| RecogError::File {
        path: origin.to_string(),
        message: e.to_string(),
    };
    let headers = reader.headers().map_err(fail)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["train_cond", "test_cond", "fold", "accuracy"] {
        return Err(RecogError::File {
            path: origin.to_string(),
            message: "expected header train_cond,test_cond,fold,accuracy".into(),
        });
    }
    reader.deserialize().map(|r| r.map_err(fail)).collect()
}

pub fn fold_results_to_csv(results: &[FoldResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn load_fold_results(path: impl AsRef<Path>) -> Result<Vec<FoldResult>, RecogError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| RecogError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    fold_results_from_csv(&text, &path.display().to_string())
}
