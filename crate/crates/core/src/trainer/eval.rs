//! Sequence accuracy.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datasynth::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::parallel;

/// Scoring form of a string. Case-insensitive scoring keeps only
/// alphanumerics and folds case; case-sensitive scoring compares exactly.
pub fn normalize(s: &str, case_sensitive: bool) -> String {
    if case_sensitive {
        s.to_string()
    } else {
        s.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub label: String,
    pub prediction: String,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub correct: usize,
    pub total: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    /// Per-sample TSV: `label<TAB>prediction<TAB>correct` with a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("label\tprediction\tcorrect\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}", r.label, r.prediction, u8::from(r.correct));
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Greedy predictions for every sample, in order.
pub fn predict(model: &Model, samples: &[Sample]) -> Result<Vec<String>> {
    parallel::map_ordered(samples, |s| model.decode_greedy(&s.image).map(|(text, _)| text))
        .into_iter()
        .collect()
}

/// Exact-match sequence accuracy after [`normalize`].
pub fn evaluate(model: &Model, samples: &[Sample], case_sensitive: bool) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("cannot evaluate an empty dataset".into()));
    }
    let predictions = predict(model, samples)?;
    Ok(score(samples.iter().map(|s| s.label.as_str()), predictions, case_sensitive))
}

/// Scores `predictions` against `labels`.
pub fn score<'a>(labels: impl Iterator<Item = &'a str>, predictions: Vec<String>, case_sensitive: bool) -> EvalResult {
    let rows: Vec<EvalRow> = labels
        .zip(predictions)
        .map(|(label, prediction)| EvalRow {
            correct: normalize(label, case_sensitive) == normalize(&prediction, case_sensitive),
            label: label.to_string(),
            prediction,
        })
        .collect();
    EvalResult {
        correct: rows.iter().filter(|r| r.correct).count(),
        total: rows.len(),
        rows,
    }
}
