//! Synthetic exchangeable classification data.
//!
//! Each sample draws a true class distribution from a symmetric Dirichlet,
//! draws its clean label from that distribution, and reports a "model"
//! output equal to the true distribution sharpened or flattened by a
//! temperature: `p_i ∝ t_i^(1 / temperature)`. Any positive temperature keeps
//! the class ranking of the true distribution.
//!
//! The Dirichlet draw normalizes independent Gamma(concentration, 1)
//! variates. Gamma variates use the Marsaglia–Tsang squeeze method with
//! Box–Muller normals, and shapes below one are boosted via
//! `G(a) = G(a + 1) · U^(1/a)`. Everything is built from the generator's
//! uniform `f64` deviates so the stream is reproducible from the seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{corrupt_with, NoiseModel};
use crate::pool::LabeledPool;
use crate::probs::ProbMatrix;
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub k: usize,
    #[serde(default = "one")]
    pub concentration: f64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    /// Noise level applied to the observed labels of the generated pool.
    #[serde(default)]
    pub epsilon: f64,
    /// Swap the model's two most probable classes: a negative control that
    /// violates rank preservation.
    #[serde(default)]
    pub rank_breaking: bool,
}

fn one() -> f64 {
    1.0
}

impl SynthConfig {
    pub fn new(n: usize, k: usize, seed: u64) -> Self {
        Self {
            n,
            k,
            concentration: 1.0,
            temperature: 1.0,
            seed,
            epsilon: 0.0,
            rank_breaking: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("synthetic sample count must be positive"));
        }
        if self.k < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.k)));
        }
        for (name, v) in [("concentration", self.concentration), ("temperature", self.temperature)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// A generated pool together with the distributions that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticPool {
    pub pool: LabeledPool,
    pub true_probs: ProbMatrix,
}

fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    1.0 - rng.gen::<f64>()
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let r = (-2.0 * open_unit(rng).ln()).sqrt();
    r * (std::f64::consts::TAU * rng.gen::<f64>()).cos()
}

/// Gamma(shape, 1) variate.
pub fn gamma_variate<R: Rng>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let boost = open_unit(rng).powf(1.0 / shape);
        return gamma_variate(shape + 1.0, rng) * boost;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = standard_normal(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = open_unit(rng);
        if u < 1.0 - 0.0331 * x.powi(4) || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Symmetric Dirichlet draw written into `out`.
pub fn dirichlet_into<R: Rng>(concentration: f64, out: &mut [f64], rng: &mut R) {
    loop {
        out.iter_mut().for_each(|g| *g = gamma_variate(concentration, rng));
        let sum: f64 = out.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            out.iter_mut().for_each(|g| *g /= sum);
            return;
        }
    }
}

fn sample_class<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the total; fall back to the last class with mass
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

fn apply_temperature(true_p: &[f64], temperature: f64, out: &mut [f64]) {
    if temperature == 1.0 {
        out.copy_from_slice(true_p);
        return;
    }
    let inv = 1.0 / temperature;
    let top = true_p.iter().copied().fold(0.0, f64::max);
    // scale by the max first so large exponents do not underflow every entry
    for (o, &t) in out.iter_mut().zip(true_p) {
        *o = (t / top).powf(inv);
    }
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|o| *o /= sum);
}

fn swap_top_two(p: &mut [f64]) {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    p.swap(idx[0], idx[1]);
}

/// Generates a pool with clean labels retained.
pub fn generate(config: &SynthConfig) -> Result<SyntheticPool> {
    config.validate()?;
    let noise = NoiseModel::new(config.epsilon, config.k)?;
    let (n, k) = (config.n, config.k);
    let mut rng = rng_from_seed(config.seed);

    let mut true_flat = vec![0.0; n * k];
    let mut model_flat = vec![0.0; n * k];
    let mut clean = Vec::with_capacity(n);
    for (t, m) in true_flat.chunks_exact_mut(k).zip(model_flat.chunks_exact_mut(k)) {
        dirichlet_into(config.concentration, t, &mut rng);
        clean.push(sample_class(t, &mut rng));
        apply_temperature(t, config.temperature, m);
        if config.rank_breaking {
            swap_top_two(m);
        }
    }
    let observed = corrupt_with(&clean, &noise, &mut rng);

    let pool = LabeledPool::new(ProbMatrix::from_flat(k, model_flat)?, observed)?
        .with_clean_labels(clean)?
        .with_noise(noise)?;
    Ok(SyntheticPool {
        pool,
        true_probs: ProbMatrix::from_flat(k, true_flat)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn order(p: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        idx
    }

    #[test]
    fn unit_temperature_reports_true_distribution() {
        let s = generate(&SynthConfig::new(200, 5, 1)).unwrap();
        assert_eq!(s.pool.probs, s.true_probs);
    }

    #[test]
    fn temperature_preserves_ranking() {
        for temperature in [0.3, 0.7, 2.0, 5.0] {
            let cfg = SynthConfig { temperature, ..SynthConfig::new(500, 6, 2) };
            let s = generate(&cfg).unwrap();
            for (m, t) in s.pool.probs.rows().zip(s.true_probs.rows()) {
                assert_eq!(order(m), order(t));
            }
        }
    }

    #[test]
    fn rank_breaking_changes_the_top_class() {
        let cfg = SynthConfig { rank_breaking: true, ..SynthConfig::new(100, 4, 3) };
        let s = generate(&cfg).unwrap();
        let broken = s
            .pool
            .probs
            .rows()
            .zip(s.true_probs.rows())
            .filter(|(m, t)| order(m)[0] != order(t)[0])
            .count();
        assert_eq!(broken, 100);
    }

    #[test]
    fn labels_follow_the_true_distribution() {
        // With concentration 1 the expected true probability of the drawn
        // label is E[sum t_i^2] = 2 / (k + 1).
        let k = 4;
        let s = generate(&SynthConfig::new(200_000, k, 4)).unwrap();
        let clean = s.pool.clean_labels.as_ref().unwrap();
        let mean: f64 = s
            .true_probs
            .rows()
            .zip(clean)
            .map(|(t, &y)| t[y])
            .sum::<f64>()
            / clean.len() as f64;
        assert!((mean - 2.0 / (k as f64 + 1.0)).abs() < 0.003, "{mean}");
    }

    #[test]
    fn gamma_moments() {
        let mut rng = rng_from_seed(9);
        for shape in [0.3, 1.0, 2.5, 10.0] {
            let n = 200_000;
            let xs: Vec<f64> = (0..n).map(|_| gamma_variate(shape, &mut rng)).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let se = (shape / n as f64).sqrt();
            assert!((mean - shape).abs() < 5.0 * se, "shape {shape}: mean {mean}");
            assert!((var - shape).abs() / shape < 0.05, "shape {shape}: var {var}");
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate(&SynthConfig { epsilon: 0.3, ..SynthConfig::new(50, 3, 7) }).unwrap();
        let b = generate(&SynthConfig { epsilon: 0.3, ..SynthConfig::new(50, 3, 7) }).unwrap();
        assert_eq!(a.pool, b.pool);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate(&SynthConfig::new(0, 3, 0)).is_err());
        assert!(generate(&SynthConfig::new(10, 1, 0)).is_err());
        assert!(generate(&SynthConfig { concentration: 0.0, ..SynthConfig::new(10, 3, 0) }).is_err());
        assert!(generate(&SynthConfig { temperature: -1.0, ..SynthConfig::new(10, 3, 0) }).is_err());
        assert!(generate(&SynthConfig { epsilon: 1.5, ..SynthConfig::new(10, 3, 0) }).is_err());
    }
}
