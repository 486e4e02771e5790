//! What do the hybrid branch's attention queries encode?
//!
//! Queries `h_t` are collected under teacher forcing and grouped by label
//! length `l`. The averaged cross-sequence cosine similarity `S_l(i, j)`
//! shows whether queries of the same step resemble each other regardless
//! of the characters involved. A linear regression of the step index on
//! the query measures how much position the queries carry.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasynth::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::parallel;
use crate::rng::SplitMix64;

/// Query matrices grouped by sequence length: for each `l`, one `l × d`
/// matrix (as rows) per sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueryBank {
    by_len: BTreeMap<usize, Vec<Vec<Vec<f64>>>>,
}

impl QueryBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one sequence's queries; the matrix must have exactly `l` rows
    /// of equal width.
    pub fn insert(&mut self, l: usize, rows: Vec<Vec<f64>>) -> Result<()> {
        if rows.len() != l || l == 0 {
            return Err(Error::Dimension(format!("a length-{l} sequence needs {l} query rows, got {}", rows.len())));
        }
        let width = rows[0].len();
        let bank_width = self.by_len.values().flatten().next().map(|m| m[0].len());
        if rows.iter().any(|r| r.len() != width) || bank_width.is_some_and(|w| w != width) {
            return Err(Error::Dimension("query rows must share one width".to_string()));
        }
        self.by_len.entry(l).or_default().push(rows);
        Ok(())
    }

    pub fn sequences(&self, l: usize) -> &[Vec<Vec<f64>>] {
        self.by_len.get(&l).map_or(&[], Vec::as_slice)
    }

    /// Lengths present, ascending.
    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_len.keys().copied()
    }

    pub fn total_queries(&self) -> usize {
        self.by_len.values().flatten().map(Vec::len).sum()
    }
}

/// Teacher-forced `h_t`, `t = 1..=l`, for every sample whose label length
/// is in `lengths` (all lengths when `None`).
pub fn collect_queries(model: &Model, samples: &[Sample], lengths: Option<&[usize]>) -> Result<QueryBank> {
    if !model.config.has_hybrid() {
        return Err(Error::Config("query dissection needs the hybrid branch".into()));
    }
    let chosen: Vec<&Sample> = samples
        .iter()
        .filter(|s| lengths.is_none_or(|ls| ls.contains(&s.label.chars().count())))
        .collect();
    let matrices = parallel::map_ordered(&chosen, |s| {
        let (_, records) = model.forward_teacher_forced(&s.image, &s.label)?;
        let l = s.label.chars().count();
        Ok::<_, Error>((
            l,
            records[..l]
                .iter()
                .map(|r| r.h_t.clone().expect("hybrid variants record h_t"))
                .collect::<Vec<_>>(),
        ))
    });
    let mut bank = QueryBank::new();
    for m in matrices {
        let (l, rows) = m?;
        if l > 0 {
            bank.insert(l, rows)?;
        }
    }
    Ok(bank)
}

/// `S_l` as a row-major `l × l` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub l: usize,
    pub values: Vec<f64>,
    /// Sequences averaged over.
    pub count: usize,
    /// Zero query vectors met; their cosines count as 0.
    pub zero_vectors: usize,
}

impl SimilarityMatrix {
    /// 0-based entry `(i, j)`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.l + j]
    }

    pub fn diagonal_mean(&self) -> f64 {
        (0..self.l).map(|i| self.get(i, i)).sum::<f64>() / self.l as f64
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        let l = self.l;
        if l < 2 {
            return f64::NAN;
        }
        let total: f64 = (0..l).flat_map(|i| (0..l).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| self.get(i, j)).sum();
        total / (l * (l - 1)) as f64
    }

    /// For each adjacent pair `(i, i+1)`, the band similarity divided by the
    /// mean of the two diagonal entries.
    pub fn band_ratios(&self) -> Vec<f64> {
        (0..self.l.saturating_sub(1))
            .map(|i| {
                let band = 0.5 * (self.get(i, i + 1) + self.get(i + 1, i));
                band / (0.5 * (self.get(i, i) + self.get(i + 1, i + 1)))
            })
            .collect()
    }

    /// Least-squares slope of [`band_ratios`](Self::band_ratios) against
    /// the step index; positive when adjacent steps grow more alike later
    /// in the sequence.
    pub fn band_trend(&self) -> f64 {
        let r = self.band_ratios();
        let n = r.len() as f64;
        if r.len() < 2 {
            return 0.0;
        }
        let mean_x = (n - 1.0) / 2.0;
        let mean_y = r.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (x, y) in r.iter().enumerate() {
            sxy += (x as f64 - mean_x) * (y - mean_y);
            sxx += (x as f64 - mean_x).powi(2);
        }
        sxy / sxx
    }
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0).then(|| v.iter().map(|x| x / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `S_l(i, j) = Σ_{m≠n} cos(h_i^m, h_j^n) / (N(N−1))` over the `N` length-`l`
/// sequences: only pairs of different sequences count, on the diagonal too.
///
/// With unit vectors `u`, the sum equals `(Σ_m u_i^m)·(Σ_n u_j^n) − Σ_m
/// u_i^m·u_j^m`, which avoids the quadratic pair loop.
pub fn similarity_matrix(bank: &QueryBank, l: usize) -> Result<SimilarityMatrix> {
    let seqs = bank.sequences(l);
    let n = seqs.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "S_{l} needs at least 2 sequences of length {l}, found {n}"
        )));
    }
    let d = seqs[0][0].len();
    let mut zero_vectors = 0;
    let units: Vec<Vec<Vec<f64>>> = seqs
        .iter()
        .map(|m| {
            m.iter()
                .map(|h| {
                    unit(h).unwrap_or_else(|| {
                        zero_vectors += 1;
                        vec![0.0; d]
                    })
                })
                .collect()
        })
        .collect();
    if zero_vectors > 0 {
        log::warn!("S_{l}: {zero_vectors} zero query vectors; their cosines count as 0");
    }
    let mut sums = vec![vec![0.0; d]; l];
    for m in &units {
        for (i, u) in m.iter().enumerate() {
            sums[i].iter_mut().zip(u).for_each(|(s, x)| *s += x);
        }
    }
    let mut values = vec![0.0; l * l];
    for i in 0..l {
        for j in i..l {
            let same: f64 = units.iter().map(|m| dot(&m[i], &m[j])).sum();
            let v = (dot(&sums[i], &sums[j]) - same) / (n * (n - 1)) as f64;
            values[i * l + j] = v;
            values[j * l + i] = v;
        }
    }
    Ok(SimilarityMatrix {
        l,
        values,
        count: n,
        zero_vectors,
    })
}

/// Heatmap CSV: a header of 1-based step indices, then one row of `S`
/// values per step, nine decimals each.
pub fn heatmap_csv(s: &SimilarityMatrix) -> String {
    let mut out = (1..=s.l).map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    out.push('\n');
    for i in 0..s.l {
        let row: Vec<String> = (0..s.l).map(|j| format!("{:.9}", s.get(i, j))).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn export_heatmap(s: &SimilarityMatrix, path: &Path) -> Result<()> {
    fs::write(path, heatmap_csv(s)).map_err(|e| Error::io(path, e))
}

/// Parses a heatmap CSV back into rows of values.
pub fn parse_heatmap(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    let l = lines.next().map_or(0, |h| h.split(',').count());
    let rows = lines
        .map(|line| {
            line.split(',')
                .map(|v| v.parse::<f64>().map_err(|e| Error::Format(format!("heatmap value {v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.len() != l || rows.iter().any(|r| r.len() != l) {
        return Err(Error::Format(format!("heatmap is not {l}×{l}")));
    }
    Ok(rows)
}

/// Affine least-squares fit `y ≈ w·x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFit {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }
}

/// Ridge added to the Gram matrix diagonal for conditioning.
pub const RIDGE: f64 = 1e-8;

/// Solves the normal equations `(XᵀX + ridge·I) β = Xᵀy` for `X = [x, 1]`
/// by Cholesky factorization.
pub fn fit_linear(xs: &[Vec<f64>], ys: &[f64], ridge: f64) -> Result<LinearFit> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InsufficientData("regression needs matching, non-empty inputs".into()));
    }
    let d = xs[0].len();
    let p = d + 1;
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    let mut row = vec![1.0; p];
    for (x, &y) in xs.iter().zip(ys) {
        if x.len() != d {
            return Err(Error::Dimension("regressors must share one width".to_string()));
        }
        row[..d].copy_from_slice(x);
        for i in 0..p {
            rhs[i] += row[i] * y;
            for j in 0..=i {
                gram[i * p + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..p {
        gram[i * p + i] += ridge;
        for j in 0..i {
            gram[j * p + i] = gram[i * p + j];
        }
    }
    let beta = cholesky_solve(&gram, &rhs, p)?;
    Ok(LinearFit {
        weights: beta[..d].to_vec(),
        bias: beta[d],
    })
}

/// Solves `A x = b` for symmetric positive definite `A` (`n × n`).
pub fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let diag = a[i * n + i] - s;
                if !(diag > 0.0) {
                    return Err(Error::Numeric {
                        name: "cholesky".into(),
                        detail: format!("matrix is not positive definite at pivot {i}"),
                    });
                }
                l[i * n + i] = diag.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    Ok(x)
}

/// Classic `R² = 1 − SS_res / SS_tot`.
pub fn r_squared(fit: &LinearFit, xs: &[Vec<f64>], ys: &[f64]) -> Result<f64> {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedRSquared(format!("all {} targets equal {mean}", ys.len())));
    }
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - fit.predict(x)).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Regression report as written to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub l: usize,
    /// Query vectors used (sequences × l).
    pub n: usize,
    pub r2_train: f64,
    pub r2_test: f64,
    pub split_seed: u64,
}

/// Fits `t = W_r h_t + b_r` on the length-`l` queries. Rows are shuffled
/// with `split_seed` and the first `split` fraction trains the fit.
pub fn position_regression(
    bank: &QueryBank,
    l: usize,
    split: f64,
    split_seed: u64,
) -> Result<(RegressionReport, LinearFit)> {
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::Config(format!("split must lie in (0, 1), got {split}")));
    }
    let mut rows: Vec<(&Vec<f64>, f64)> = bank
        .sequences(l)
        .iter()
        .flat_map(|m| m.iter().enumerate().map(|(t, h)| (h, (t + 1) as f64)))
        .collect();
    let n = rows.len();
    let n_train = (n as f64 * split).round() as usize;
    if n_train < 2 || n - n_train < 2 {
        return Err(Error::InsufficientData(format!(
            "{n} length-{l} queries cannot be split {split} / {}",
            1.0 - split
        )));
    }
    SplitMix64::new(split_seed).shuffle(&mut rows);
    let (train, test) = rows.split_at(n_train);
    let unzip = |part: &[(&Vec<f64>, f64)]| -> (Vec<Vec<f64>>, Vec<f64>) {
        part.iter().map(|(h, t)| ((*h).clone(), *t)).unzip()
    };
    let (x_train, y_train) = unzip(train);
    let (x_test, y_test) = unzip(test);
    let fit = fit_linear(&x_train, &y_train, RIDGE)?;
    let report = RegressionReport {
        l,
        n,
        r2_train: r_squared(&fit, &x_train, &y_train)?,
        r2_test: r_squared(&fit, &x_test, &y_test)?,
        split_seed,
    };
    Ok((report, fit))
}
