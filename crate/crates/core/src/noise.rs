//! Uniform ("random flip") label noise.
//!
//! With probability `epsilon` a label is replaced by a class drawn uniformly
//! from all `k` classes, the original included, so that
//! `P(observed = j | true = i) = (1 - epsilon) [i = j] + epsilon / k`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::check_labels;
use crate::probs::ProbVector;
use crate::score::ScoreSpec;
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    epsilon: f64,
    k: usize,
}

impl NoiseModel {
    /// `epsilon` may be 1 for simulation; the robust calibration methods
    /// reject it where the threshold rewrite divides by `1 - epsilon`.
    pub fn new(epsilon: f64, k: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::config(format!(
                "noise level must lie in [0, 1], got {epsilon}"
            )));
        }
        if k < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {k}")));
        }
        Ok(Self { epsilon, k })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Probability that the observed label equals the true one.
    pub fn keep_probability(&self) -> f64 {
        1.0 - self.epsilon + self.epsilon / self.k as f64
    }
}

/// Corrupts each label independently. Deterministic in `seed`.
pub fn corrupt_labels(clean: &[usize], model: &NoiseModel, seed: u64) -> Result<Vec<usize>> {
    check_labels(clean, clean.len(), model.k, "clean")?;
    let mut rng = rng_from_seed(seed);
    Ok(corrupt_with(clean, model, &mut rng))
}

pub(crate) fn corrupt_with<R: Rng>(clean: &[usize], model: &NoiseModel, rng: &mut R) -> Vec<usize> {
    if model.epsilon == 0.0 {
        return clean.to_vec();
    }
    clean
        .iter()
        .map(|&y| {
            if rng.gen::<f64>() < model.epsilon {
                rng.gen_range(0..model.k)
            } else {
                y
            }
        })
        .collect()
}

/// Posterior over the true label given the observed one, under a uniform prior.
pub fn posterior_true_label(observed: usize, model: &NoiseModel) -> Result<ProbVector> {
    if observed >= model.k {
        return Err(Error::input(format!(
            "observed label {observed} out of range for k = {}",
            model.k
        )));
    }
    let off = model.epsilon / model.k as f64;
    let mut v = vec![off; model.k];
    v[observed] = 1.0 - model.epsilon + off;
    ProbVector::new(v)
}

pub(crate) fn blend(raw: f64, mean: f64, epsilon: f64) -> f64 {
    (1.0 - epsilon) * raw + epsilon * mean
}

/// Expected noise-free score given the observed label:
/// `(1 - epsilon) S(x, observed) + epsilon S(x)`.
///
/// A randomized spec uses the same `u` for both terms.
pub fn robust_score(
    p: &[f64],
    observed: usize,
    model: &NoiseModel,
    spec: &ScoreSpec,
    u: Option<f64>,
) -> Result<f64> {
    if p.len() != model.k {
        return Err(Error::input(format!(
            "probability vector has k = {}, noise model k = {}",
            p.len(),
            model.k
        )));
    }
    let raw = spec.score(p, observed, u)?;
    let mean = crate::score::mean_class_score(p, spec, u)?;
    Ok(blend(raw, mean, model.epsilon))
}
