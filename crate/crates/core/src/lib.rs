//! Conformal prediction with a validation set whose labels were corrupted by
//! uniform label noise.
//!
//! Standard split-conformal calibration on noisy labels inflates the
//! threshold and produces oversized prediction sets. Given the noise level
//! `ε`, this crate replaces each calibration score with its expectation over
//! the posterior of the true label,
//!
//! ```text
//! Ŝ(x, ỹ, ε) = (1 - ε) S(x, ỹ) + ε S(x),     S(x) = (1/k) Σ_i S(x, i)
//! ```
//!
//! calibrates on those, and then forms test-time sets with the raw score
//! (`NR_CP`). The noisy baseline (`NOISY_CP`), the clean-label oracle
//! (`ORACLE_CP`) and the variant that also uses `Ŝ` at test time (`NRES_CP`)
//! are provided for comparison, along with a repeated-split evaluation
//! harness and a synthetic data generator.
//!
//! ```
//! use noisy_cp::{calibrate, prediction_set, LabeledPool, MethodKind, NoiseModel, ProbMatrix, ScoreSpec};
//!
//! let probs = ProbMatrix::from_rows(&[
//!     vec![0.7, 0.2, 0.1],
//!     vec![0.1, 0.8, 0.1],
//!     vec![0.3, 0.3, 0.4],
//!     vec![0.6, 0.3, 0.1],
//! ])?;
//! let pool = LabeledPool::new(probs, vec![0, 1, 2, 1])?
//!     .with_noise(NoiseModel::new(0.2, 3)?)?;
//!
//! let calib = calibrate(&pool, MethodKind::NrCp, &ScoreSpec::aps(), 0.2, 0)?;
//! let set = prediction_set(&[0.5, 0.4, 0.1], &calib, None)?;
//! assert!(set.contains(0));
//! # Ok::<(), noisy_cp::Error>(())
//! ```
//!
//! The guide in `book/` walks through the scores, the noise model, the
//! calibration methods and the experiment protocol.

pub mod calibrate;
pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod noise;
pub mod pool;
pub mod probs;
pub mod score;
pub mod seed;
pub mod synth;

pub use calibrate::{
    calibrate, calibration_scores, conformal_quantile, prediction_set, set_membership_threshold,
    CalibrationResult, MethodKind, PredictionSet,
};
pub use error::{Error, Result};
pub use eval::{
    evaluate_sets, noise_sweep, run_repeated_splits, ExperimentReport, MethodSummary, SetMetrics,
    SplitConfig, SweepReport,
};
pub use noise::{corrupt_labels, posterior_true_label, robust_score, NoiseModel};
pub use pool::LabeledPool;
pub use probs::{ProbMatrix, ProbVector};
pub use score::{
    aps_score, hps_score, mean_class_score, rand_score, raps_score, score_all_classes, ScoreKind,
    ScoreSpec,
};
pub use synth::{generate, SynthConfig, SyntheticPool};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scores.md")]
    mod scores {}
    #[doc = include_str!("../../../book/src/noise.md")]
    mod noise {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
