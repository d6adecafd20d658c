use crate::error::{Error, Result};
use crate::noise::NoiseModel;
use crate::probs::ProbMatrix;

/// Model outputs with observed (possibly noisy) labels.
///
/// `clean_labels` is only present in simulations or when ground truth is
/// known; `noise` records how `observed_labels` were produced.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPool {
    pub probs: ProbMatrix,
    pub observed_labels: Vec<usize>,
    pub clean_labels: Option<Vec<usize>>,
    pub noise: Option<NoiseModel>,
}

impl LabeledPool {
    pub fn new(probs: ProbMatrix, observed_labels: Vec<usize>) -> Result<Self> {
        check_labels(&observed_labels, probs.n(), probs.k(), "observed")?;
        Ok(Self {
            probs,
            observed_labels,
            clean_labels: None,
            noise: None,
        })
    }

    pub fn with_clean_labels(mut self, clean: Vec<usize>) -> Result<Self> {
        check_labels(&clean, self.n(), self.k(), "clean")?;
        self.clean_labels = Some(clean);
        Ok(self)
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Result<Self> {
        if noise.k() != self.k() {
            return Err(Error::config(format!(
                "noise model is for k = {}, pool has k = {}",
                noise.k(),
                self.k()
            )));
        }
        self.noise = Some(noise);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.probs.n()
    }

    pub fn k(&self) -> usize {
        self.probs.k()
    }

    /// Restriction of the pool to the given sample indices.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |labels: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
        Self {
            probs: self.probs.select(idx),
            observed_labels: pick(&self.observed_labels),
            clean_labels: self.clean_labels.as_deref().map(pick),
            noise: self.noise,
        }
    }
}

pub(crate) fn check_labels(labels: &[usize], n: usize, k: usize, what: &str) -> Result<()> {
    if labels.len() != n {
        return Err(Error::input(format!(
            "{what} label count {} does not match {n} probability rows",
            labels.len()
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
        return Err(Error::input(format!(
            "{what} label {y} at sample {i} is out of range for k = {k}"
        )));
    }
    Ok(())
}
