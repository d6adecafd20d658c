//! Row-stochastic probability containers.
//!
//! Rows are validated once on construction; the score kernels then work on
//! plain `&[f64]` slices.

use crate::error::{Error, Result};

/// Rows whose sum is off by more than this are rejected.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Rows within this distance of 1 are kept bit-for-bit; beyond it (but within
/// [`SUM_TOLERANCE`]) they are renormalized.
const RENORM_SLACK: f64 = 1e-12;

/// Checks one probability row and renormalizes it in place when its sum is
/// close to, but not exactly, one.
pub fn validate_row(row: &mut [f64]) -> Result<()> {
    if row.len() < 2 {
        return Err(Error::input(format!(
            "need at least 2 classes, got {}",
            row.len()
        )));
    }
    for (i, &p) in row.iter().enumerate() {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::input(format!(
                "probability p_{i} = {p} is outside [0, 1]"
            )));
        }
    }
    let sum: f64 = row.iter().sum();
    let dev = (sum - 1.0).abs();
    if dev > SUM_TOLERANCE {
        return Err(Error::input(format!(
            "probabilities sum to {sum}, not 1 (tolerance {SUM_TOLERANCE})"
        )));
    }
    if dev > RENORM_SLACK {
        row.iter_mut().for_each(|p| *p /= sum);
    }
    Ok(())
}

/// Numerically stable softmax, for inputs given as logits.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// A single validated class-probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(mut probs: Vec<f64>) -> Result<Self> {
        validate_row(&mut probs)?;
        Ok(Self(probs))
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index and value of the most probable class (lowest index on ties).
    pub fn top(&self) -> (usize, f64) {
        argmax(&self.0)
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn argmax(p: &[f64]) -> (usize, f64) {
    p.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
}

/// `n × k` matrix of model outputs, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    k: usize,
    data: Vec<f64>,
}

impl ProbMatrix {
    /// Builds a matrix from row-major data, validating every row.
    pub fn from_flat(k: usize, mut data: Vec<f64>) -> Result<Self> {
        if k < 2 {
            return Err(Error::input(format!("need at least 2 classes, got {k}")));
        }
        if data.is_empty() || !data.len().is_multiple_of(k) {
            return Err(Error::input(format!(
                "data length {} is not a positive multiple of k = {k}",
                data.len()
            )));
        }
        for (i, row) in data.chunks_mut(k).enumerate() {
            validate_row(row).map_err(|e| Error::input(format!("row {i}: {e}")))?;
        }
        Ok(Self { k, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let k = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * k);
        for (i, r) in rows.iter().enumerate() {
            if r.as_ref().len() != k {
                return Err(Error::input(format!(
                    "row {i} has {} entries, expected {k}",
                    r.as_ref().len()
                )));
            }
            data.extend_from_slice(r.as_ref());
        }
        Self::from_flat(k, data)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.k)
    }

    /// Copies the selected rows into a new matrix. Rows are already valid.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.k);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { k: self.k, data }
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
}
