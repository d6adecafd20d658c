//! Split-conformal calibration and prediction-set construction for the four
//! calibration methods:
//!
//! | method      | calibration scores            | test-time membership              |
//! |-------------|-------------------------------|-----------------------------------|
//! | `ORACLE_CP` | `S(x, y)` on clean labels     | `S(x, y) <= q`                    |
//! | `NOISY_CP`  | `S(x, ỹ)` on observed labels  | `S(x, y) <= q`                    |
//! | `NRES_CP`   | robust `Ŝ(x, ỹ, ε)`           | `Ŝ(x, y, ε) <= q`                 |
//! | `NR_CP`     | robust `Ŝ(x, ỹ, ε)`           | `S(x, y) <= q`                    |

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::blend;
use crate::pool::LabeledPool;
use crate::probs::argmax;
use crate::score::ScoreSpec;
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodKind {
    #[serde(rename = "ORACLE_CP")]
    OracleCp,
    #[serde(rename = "NOISY_CP")]
    NoisyCp,
    #[serde(rename = "NRES_CP")]
    NresCp,
    #[serde(rename = "NR_CP")]
    NrCp,
}

impl MethodKind {
    pub const ALL: [MethodKind; 4] = [
        MethodKind::OracleCp,
        MethodKind::NoisyCp,
        MethodKind::NresCp,
        MethodKind::NrCp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::OracleCp => "ORACLE_CP",
            MethodKind::NoisyCp => "NOISY_CP",
            MethodKind::NresCp => "NRES_CP",
            MethodKind::NrCp => "NR_CP",
        }
    }

    /// Whether calibration uses the noise-robust expected score.
    pub fn is_noise_robust(&self) -> bool {
        matches!(self, MethodKind::NresCp | MethodKind::NrCp)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || m.name().replace('_', "-").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

/// Threshold serialization: a plain number, or the string `"+inf"` for the
/// overflow sentinel.
pub mod q_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(q: &f64, s: S) -> Result<S::Ok, S::Error> {
        if q.is_infinite() && *q > 0.0 {
            s.serialize_str("+inf")
        } else {
            s.serialize_f64(*q)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "+inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(de::Error::custom(format!("invalid threshold {s:?}"))),
        }
    }
}

/// Outcome of calibration: everything needed to form test-time sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub method: MethodKind,
    #[serde(with = "q_serde")]
    pub q: f64,
    pub alpha: f64,
    pub n: usize,
    pub k: usize,
    pub score_spec: ScoreSpec,
    pub epsilon: Option<f64>,
    pub seed: u64,
}

impl CalibrationResult {
    /// The threshold as a percentage (`q * 100`), for display.
    pub fn q_percent(&self) -> f64 {
        self.q * 100.0
    }

    fn noise_level(&self) -> Result<f64> {
        self.epsilon.ok_or_else(|| {
            Error::config(format!("{} calibration is missing its noise level", self.method))
        })
    }

    /// Builds the prediction set from precomputed class scores and their mean.
    pub fn set_from_scores(&self, class_scores: &[f64], mean: f64) -> Result<PredictionSet> {
        let q = self.q;
        if q == f64::INFINITY {
            return Ok(PredictionSet::full(class_scores.len()));
        }
        let members = match self.method {
            MethodKind::OracleCp | MethodKind::NoisyCp | MethodKind::NrCp => {
                select(class_scores, |s| s <= q)
            }
            MethodKind::NresCp => {
                let eps = self.noise_level()?;
                select(class_scores, |s| blend(s, mean, eps) <= q)
            }
        };
        Ok(PredictionSet(members))
    }
}

fn select(scores: &[f64], keep: impl Fn(f64) -> bool) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| keep(s))
        .map(|(i, _)| i)
        .collect()
}

/// Sorted, duplicate-free class indices. May be empty.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PredictionSet(Vec<usize>);

impl PredictionSet {
    pub fn full(k: usize) -> Self {
        Self((0..k).collect())
    }

    pub fn from_members(mut members: Vec<usize>) -> Self {
        members.sort_unstable();
        members.dedup();
        Self(members)
    }

    pub fn members(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, y: usize) -> bool {
        self.0.binary_search(&y).is_ok()
    }

    pub fn is_subset_of(&self, other: &PredictionSet) -> bool {
        self.0.iter().all(|&y| other.contains(y))
    }

    /// Adds the most probable class when the set is empty.
    pub fn force_nonempty(mut self, p: &[f64]) -> Self {
        if self.0.is_empty() {
            self.0.push(argmax(p).0);
        }
        self
    }
}

/// 1-based rank of the conformal quantile, `ceil((n + 1)(1 - alpha))`.
///
/// A tolerance of 1e-9 absorbs representation error in `alpha`, so that for
/// example `n = 9, alpha = 0.1` yields 9 rather than 10.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    (x - 1e-9).ceil().max(1.0) as usize
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// The `ceil((n + 1)(1 - alpha))`-th smallest score, or `+inf` when that rank
/// exceeds `n`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::input("cannot calibrate on an empty score list"));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::input(format!("calibration score {bad} is not a number")));
    }
    let m = quantile_rank(scores.len(), alpha);
    if m > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut buf = scores.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(m - 1, f64::total_cmp);
    Ok(*v)
}

/// Per-sample calibration scores for `method`. Randomized specs draw one
/// `u` per sample, in sample order, from `seed`.
pub fn calibration_scores(
    pool: &LabeledPool,
    method: MethodKind,
    spec: &ScoreSpec,
    seed: u64,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let labels: &[usize] = match method {
        MethodKind::OracleCp => pool
            .clean_labels
            .as_deref()
            .ok_or_else(|| Error::config("ORACLE_CP needs clean labels"))?,
        _ => &pool.observed_labels,
    };
    let epsilon = if method.is_noise_robust() {
        let noise = pool
            .noise
            .ok_or_else(|| Error::config(format!("{method} needs a noise level")))?;
        Some(noise.epsilon())
    } else {
        None
    };

    let mut rng = rng_from_seed(seed);
    let mut class_scores = Vec::with_capacity(pool.k());
    let scores = pool
        .probs
        .rows()
        .zip(labels)
        .map(|(p, &y)| {
            let u = if spec.randomized { rng.gen::<f64>() } else { 0.0 };
            let raw = spec.score_unchecked(p, y, u);
            match epsilon {
                None => raw,
                Some(eps) => {
                    spec.score_all_into(p, u, &mut class_scores);
                    blend(raw, spec.mean_of(&class_scores), eps)
                }
            }
        })
        .collect();
    Ok(scores)
}

/// Calibrates `method` on `pool`.
pub fn calibrate(
    pool: &LabeledPool,
    method: MethodKind,
    spec: &ScoreSpec,
    alpha: f64,
    seed: u64,
) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    let scores = calibration_scores(pool, method, spec, seed)?;
    let q = conformal_quantile(&scores, alpha)?;
    Ok(CalibrationResult {
        method,
        q,
        alpha,
        n: pool.n(),
        k: pool.k(),
        score_spec: *spec,
        epsilon: method
            .is_noise_robust()
            .then(|| pool.noise.map(|m| m.epsilon()))
            .flatten(),
        seed,
    })
}

/// Prediction set for one test sample. `u` must be given iff the score is randomized.
pub fn prediction_set(p: &[f64], calib: &CalibrationResult, u: Option<f64>) -> Result<PredictionSet> {
    if p.len() != calib.k {
        return Err(Error::input(format!(
            "sample has {} classes, calibration was built for {}",
            p.len(),
            calib.k
        )));
    }
    let scores = crate::score::score_all_classes(p, &calib.score_spec, u)?;
    let mean = calib.score_spec.mean_of(&scores);
    calib.set_from_scores(&scores, mean)
}

/// Effective raw-score threshold of an `NRES_CP` calibration for a sample
/// whose class-averaged score is `mean_score`: `(q - ε S(x)) / (1 - ε)`.
pub fn set_membership_threshold(calib: &CalibrationResult, mean_score: f64) -> Result<f64> {
    if calib.method != MethodKind::NresCp {
        return Err(Error::config(format!(
            "membership threshold rewrite applies to NRES_CP, not {}",
            calib.method
        )));
    }
    let eps = calib.noise_level()?;
    if eps >= 1.0 {
        return Err(Error::config("membership threshold is undefined at epsilon = 1"));
    }
    Ok((calib.q - eps * mean_score) / (1.0 - eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseModel;
    use crate::probs::ProbMatrix;

    fn calib(method: MethodKind, q: f64, spec: ScoreSpec, eps: Option<f64>, k: usize) -> CalibrationResult {
        CalibrationResult {
            method,
            q,
            alpha: 0.1,
            n: 10,
            k,
            score_spec: spec,
            epsilon: eps,
            seed: 0,
        }
    }

    #[test]
    fn quantile_examples() {
        let s: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        assert_eq!(conformal_quantile(&s, 0.1).unwrap(), 0.9);
        assert_eq!(conformal_quantile(&s, 0.05).unwrap(), f64::INFINITY);
        assert_eq!(conformal_quantile(&s, 0.5).unwrap(), 0.5);
        assert!(matches!(conformal_quantile(&[], 0.1), Err(Error::Input(_))));
        assert!(conformal_quantile(&s, 0.0).is_err());
        assert!(conformal_quantile(&s, 1.0).is_err());
        assert!(conformal_quantile(&[f64::NAN], 0.5).is_err());
    }

    #[test]
    fn quantile_with_ties_is_value_based() {
        assert_eq!(conformal_quantile(&[0.3, 0.3, 0.3, 0.1], 0.5).unwrap(), 0.3);
    }

    #[test]
    fn rank_formula() {
        assert_eq!(quantile_rank(9, 0.1), 9);
        assert_eq!(quantile_rank(9, 0.05), 10);
        assert_eq!(quantile_rank(1000, 0.1), 901);
        assert_eq!(quantile_rank(1, 0.1), 2);
    }

    fn small_pool(eps: Option<f64>) -> LabeledPool {
        let probs = ProbMatrix::from_rows(&[
            vec![0.7, 0.2, 0.1],
            vec![0.5, 0.3, 0.2],
            vec![0.1, 0.6, 0.3],
            vec![0.2, 0.2, 0.6],
        ])
        .unwrap();
        let pool = LabeledPool::new(probs, vec![0, 1, 2, 2])
            .unwrap()
            .with_clean_labels(vec![0, 0, 1, 2])
            .unwrap();
        match eps {
            Some(e) => pool.with_noise(NoiseModel::new(e, 3).unwrap()).unwrap(),
            None => pool,
        }
    }

    #[test]
    fn zero_noise_matches_noisy_cp() {
        let pool = small_pool(Some(0.0));
        for spec in [ScoreSpec::hps(), ScoreSpec::aps(), ScoreSpec::raps(0.1, 1.0)] {
            let noisy = calibrate(&pool, MethodKind::NoisyCp, &spec, 0.4, 1).unwrap();
            for m in [MethodKind::NresCp, MethodKind::NrCp] {
                assert_eq!(calibrate(&pool, m, &spec, 0.4, 1).unwrap().q, noisy.q);
            }
        }
    }

    #[test]
    fn missing_prerequisites_are_config_errors() {
        let pool = small_pool(None);
        let spec = ScoreSpec::aps();
        assert!(matches!(
            calibrate(&pool, MethodKind::NrCp, &spec, 0.1, 0),
            Err(Error::Config(_))
        ));
        let mut no_clean = small_pool(Some(0.1));
        no_clean.clean_labels = None;
        assert!(matches!(
            calibrate(&no_clean, MethodKind::OracleCp, &spec, 0.1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_sample_overflows() {
        let probs = ProbMatrix::from_rows(&[vec![0.6, 0.4]]).unwrap();
        let pool = LabeledPool::new(probs, vec![0]).unwrap();
        let c = calibrate(&pool, MethodKind::NoisyCp, &ScoreSpec::aps(), 0.1, 0).unwrap();
        assert_eq!(c.q, f64::INFINITY);
        assert_eq!(prediction_set(&[0.9, 0.1], &c, None).unwrap(), PredictionSet::full(2));
    }

    #[test]
    fn hps_thresholds_are_affine() {
        let eps = 0.3;
        let pool = small_pool(Some(eps));
        let spec = ScoreSpec::hps();
        let qn = calibrate(&pool, MethodKind::NoisyCp, &spec, 0.4, 0).unwrap().q;
        let qe = calibrate(&pool, MethodKind::NrCp, &spec, 0.4, 0).unwrap().q;
        assert!((qe - ((1.0 - eps) * qn + eps * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn set_examples() {
        let c = calib(MethodKind::NoisyCp, 0.5, ScoreSpec::hps(), None, 3);
        assert_eq!(prediction_set(&[0.7, 0.2, 0.1], &c, None).unwrap().members(), &[0]);

        let c = calib(MethodKind::NrCp, 0.85, ScoreSpec::aps(), Some(0.2), 3);
        assert_eq!(prediction_set(&[0.5, 0.3, 0.2], &c, None).unwrap().members(), &[0, 1]);

        let c = calib(MethodKind::OracleCp, f64::INFINITY, ScoreSpec::aps(), None, 3);
        assert_eq!(prediction_set(&[0.5, 0.3, 0.2], &c, None).unwrap().len(), 3);

        let c = calib(MethodKind::OracleCp, 0.1, ScoreSpec::aps(), None, 3);
        let empty = prediction_set(&[0.5, 0.3, 0.2], &c, None).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.force_nonempty(&[0.5, 0.3, 0.2]).members(), &[0]);
    }

    #[test]
    fn k_and_u_mismatch() {
        let c = calib(MethodKind::NrCp, 0.5, ScoreSpec::aps(), Some(0.2), 3);
        assert!(prediction_set(&[0.5, 0.5], &c, None).is_err());
        assert!(prediction_set(&[0.5, 0.3, 0.2], &c, Some(0.5)).is_err());
    }

    #[test]
    fn nres_uses_both_forms_consistently() {
        let p = [0.5, 0.3, 0.2];
        let spec = ScoreSpec::aps();
        let c = calib(MethodKind::NresCp, 0.8, spec, Some(0.2), 3);
        let scores = crate::score::score_all_classes(&p, &spec, None).unwrap();
        let mean = spec.mean_of(&scores);
        let t = set_membership_threshold(&c, mean).unwrap();
        let rewritten: Vec<usize> = (0..3).filter(|&y| scores[y] <= t).collect();
        assert_eq!(prediction_set(&p, &c, None).unwrap().members(), &rewritten[..]);
    }

    #[test]
    fn membership_threshold_examples() {
        let c = calib(MethodKind::NresCp, 0.9, ScoreSpec::aps(), Some(0.0), 3);
        assert_eq!(set_membership_threshold(&c, 0.4).unwrap(), 0.9);

        let c = calib(MethodKind::NresCp, 0.9, ScoreSpec::aps(), Some(0.2), 3);
        assert!((set_membership_threshold(&c, 0.8).unwrap() - 0.925).abs() < 1e-12);
        assert!((set_membership_threshold(&c, 0.9).unwrap() - 0.9).abs() < 1e-12);

        let c = calib(MethodKind::NresCp, 0.9, ScoreSpec::aps(), Some(1.0), 3);
        assert!(set_membership_threshold(&c, 0.8).is_err());
        // direct form still works at epsilon = 1
        assert!(prediction_set(&[0.5, 0.3, 0.2], &c, None).is_ok());

        let c = calib(MethodKind::NrCp, 0.9, ScoreSpec::aps(), Some(0.2), 3);
        assert!(set_membership_threshold(&c, 0.8).is_err());
    }

    #[test]
    fn calibration_sample_at_threshold_is_covered() {
        let pool = small_pool(Some(0.2));
        let spec = ScoreSpec::aps();
        let scores = calibration_scores(&pool, MethodKind::NoisyCp, &spec, 0).unwrap();
        let c = calibrate(&pool, MethodKind::NoisyCp, &spec, 0.4, 0).unwrap();
        let t = scores.iter().position(|&s| s == c.q).unwrap();
        let set = prediction_set(pool.probs.row(t), &c, None).unwrap();
        assert!(set.contains(pool.observed_labels[t]));
    }

    #[test]
    fn q_sentinel_round_trips() {
        let c = calib(MethodKind::NrCp, f64::INFINITY, ScoreSpec::aps(), Some(0.2), 3);
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"q\":\"+inf\""));
        let back: CalibrationResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);

        let c = calib(MethodKind::NrCp, 0.1 + 0.2, ScoreSpec::aps(), Some(0.2), 3);
        let back: CalibrationResult = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back.q.to_bits(), c.q.to_bits());
    }

    #[test]
    fn method_names_parse() {
        for m in MethodKind::ALL {
            assert_eq!(m.name().parse::<MethodKind>().unwrap(), m);
        }
        assert_eq!("nr-cp".parse::<MethodKind>().unwrap(), MethodKind::NrCp);
        assert!("foo".parse::<MethodKind>().is_err());
    }
}
