//! Set metrics and the repeated random-split experiment.
//!
//! Each split shuffles the pool, calibrates every requested method on the
//! first part (re-corrupting its labels when configured) and evaluates the
//! resulting prediction sets on the rest against clean labels. Splits run in
//! parallel; each one derives its randomness from `(master_seed, split)` so
//! the report does not depend on scheduling.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{calibrate, q_serde, CalibrationResult, MethodKind, PredictionSet};
use crate::error::{Error, Result};
use crate::noise::{corrupt_with, NoiseModel};
use crate::pool::LabeledPool;
use crate::score::ScoreSpec;
use crate::seed::{derive_seed, rng_from_seed, Stream};

/// Size, coverage and empty-set rate of a batch of prediction sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub size: f64,
    pub coverage: f64,
    pub empty_rate: f64,
}

pub fn evaluate_sets(sets: &[PredictionSet], labels: &[usize]) -> Result<SetMetrics> {
    if sets.len() != labels.len() {
        return Err(Error::input(format!(
            "{} prediction sets but {} labels",
            sets.len(),
            labels.len()
        )));
    }
    if sets.is_empty() {
        return Err(Error::input("no prediction sets to evaluate"));
    }
    let mut tally = Tally::default();
    for (set, &y) in sets.iter().zip(labels) {
        tally.add(set, y, None);
    }
    Ok(tally.metrics(sets.len()))
}

#[derive(Debug, Default, Clone, Copy)]
struct Tally {
    size: usize,
    covered: usize,
    covered_noisy: usize,
    empty: usize,
}

impl Tally {
    fn add(&mut self, set: &PredictionSet, clean: usize, noisy: Option<usize>) {
        self.size += set.len();
        self.covered += usize::from(set.contains(clean));
        self.covered_noisy += noisy.map_or(0, |y| usize::from(set.contains(y)));
        self.empty += usize::from(set.is_empty());
    }

    fn metrics(&self, n: usize) -> SetMetrics {
        let n = n as f64;
        SetMetrics {
            size: self.size as f64 / n,
            coverage: self.covered as f64 / n,
            empty_rate: self.empty as f64 / n,
        }
    }
}

fn default_true() -> bool {
    true
}

/// Repeated-split experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub n_splits: usize,
    pub calib_fraction: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub score_spec: ScoreSpec,
    pub methods: Vec<MethodKind>,
    pub master_seed: u64,
    /// Re-corrupt the calibration labels in every split. When false the
    /// pool's observed labels are used as given.
    #[serde(default = "default_true")]
    pub resample_noise: bool,
    /// Also measure coverage against noise-corrupted test labels.
    #[serde(default)]
    pub noisy_test: bool,
    /// Add the least-unlikely class to empty sets.
    #[serde(default)]
    pub force_nonempty: bool,
    /// Keep one raw row per (split, method) in the report.
    #[serde(default)]
    pub keep_raw: bool,
}

impl SplitConfig {
    pub fn new(alpha: f64, epsilon: f64, score_spec: ScoreSpec) -> Self {
        Self {
            n_splits: 1000,
            calib_fraction: 0.5,
            alpha,
            epsilon,
            score_spec,
            methods: MethodKind::ALL.to_vec(),
            master_seed: 0,
            resample_noise: true,
            noisy_test: false,
            force_nonempty: false,
            keep_raw: false,
        }
    }

    fn calib_size(&self, n: usize) -> Result<usize> {
        if !(self.calib_fraction > 0.0 && self.calib_fraction < 1.0) {
            return Err(Error::config(format!(
                "calib_fraction must lie in (0, 1), got {}",
                self.calib_fraction
            )));
        }
        if n < 2 {
            return Err(Error::input(format!("need at least 2 samples to split, got {n}")));
        }
        let n_cal = (n as f64 * self.calib_fraction).round() as usize;
        if n_cal == 0 || n_cal == n {
            return Err(Error::config(format!(
                "calib_fraction {} leaves an empty side for {n} samples",
                self.calib_fraction
            )));
        }
        Ok(n_cal)
    }

    fn validate(&self) -> Result<()> {
        if self.n_splits == 0 {
            return Err(Error::config("n_splits must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("no methods requested"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        self.score_spec.validate()
    }
}

/// Metrics of one method in one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub split: usize,
    pub method: MethodKind,
    #[serde(with = "q_serde")]
    pub q: f64,
    pub size: f64,
    pub coverage: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub noisy_coverage: Option<f64>,
    pub empty_rate: f64,
}

/// Across-split mean and standard deviation for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: MethodKind,
    pub mean_size: f64,
    pub std_size: f64,
    pub mean_coverage: f64,
    pub std_coverage: f64,
    #[serde(with = "q_serde")]
    pub mean_q: f64,
    /// Absent when some split overflowed to an infinite threshold.
    pub std_q: Option<f64>,
    pub empty_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_noisy_coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std_noisy_coverage: Option<f64>,
}

impl MethodSummary {
    /// Monte Carlo standard error of the mean coverage.
    pub fn coverage_se(&self, n_splits: usize) -> f64 {
        self.std_coverage / (n_splits as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: SplitConfig,
    pub k: usize,
    pub n_pool: usize,
    pub n_calib: usize,
    pub n_test: usize,
    pub methods: Vec<MethodSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw: Option<Vec<SplitRow>>,
}

impl ExperimentReport {
    pub fn method(&self, m: MethodKind) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value),
/// summed in the given order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

struct Prepared<'a> {
    pool: &'a LabeledPool,
    clean: &'a [usize],
    noise: NoiseModel,
    n_cal: usize,
    methods: Vec<MethodKind>,
}

fn run_split(prep: &Prepared<'_>, config: &SplitConfig, split: usize) -> Result<Vec<SplitRow>> {
    let pool = prep.pool;
    let (n, k) = (pool.n(), pool.k());
    let seed = derive_seed(config.master_seed, Stream::Split, split as u64);

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(derive_seed(seed, Stream::Shuffle, 0)));
    let (cal_idx, test_idx) = perm.split_at(prep.n_cal);

    let mut cal = pool.subset(cal_idx);
    let cal_clean: Vec<usize> = cal_idx.iter().map(|&i| prep.clean[i]).collect();
    if config.resample_noise {
        let mut rng = rng_from_seed(derive_seed(seed, Stream::CalibrationNoise, 0));
        cal.observed_labels = corrupt_with(&cal_clean, &prep.noise, &mut rng);
    }
    cal.clean_labels = Some(cal_clean);
    cal.noise = Some(prep.noise);

    let u_seed = derive_seed(seed, Stream::CalibrationU, 0);
    let calibs: Vec<CalibrationResult> = prep
        .methods
        .iter()
        .map(|&m| calibrate(&cal, m, &config.score_spec, config.alpha, u_seed))
        .collect::<Result<_>>()?;

    let test_clean: Vec<usize> = test_idx.iter().map(|&i| prep.clean[i]).collect();
    let test_noisy = config.noisy_test.then(|| {
        let mut rng = rng_from_seed(derive_seed(seed, Stream::TestNoise, 0));
        corrupt_with(&test_clean, &prep.noise, &mut rng)
    });

    let spec = &config.score_spec;
    let mut u_rng = rng_from_seed(derive_seed(seed, Stream::TestU, 0));
    let mut tallies = vec![Tally::default(); calibs.len()];
    let mut scores = Vec::with_capacity(k);
    for (j, &i) in test_idx.iter().enumerate() {
        let p = pool.probs.row(i);
        let u = if spec.randomized { u_rng.gen::<f64>() } else { 0.0 };
        spec.score_all_into(p, u, &mut scores);
        let mean = spec.mean_of(&scores);
        for (c, tally) in calibs.iter().zip(tallies.iter_mut()) {
            let mut set = c.set_from_scores(&scores, mean)?;
            if config.force_nonempty {
                set = set.force_nonempty(p);
            }
            tally.add(&set, test_clean[j], test_noisy.as_ref().map(|t| t[j]));
        }
    }

    let n_test = test_idx.len();
    Ok(calibs
        .iter()
        .zip(&tallies)
        .map(|(c, t)| {
            let m = t.metrics(n_test);
            SplitRow {
                split,
                method: c.method,
                q: c.q,
                size: m.size,
                coverage: m.coverage,
                noisy_coverage: config
                    .noisy_test
                    .then(|| t.covered_noisy as f64 / n_test as f64),
                empty_rate: m.empty_rate,
            }
        })
        .collect())
}

fn summarize(method: MethodKind, rows: &[&SplitRow]) -> MethodSummary {
    let col = |f: &dyn Fn(&SplitRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
    let (mean_size, std_size) = mean_std(&col(&|r| r.size));
    let (mean_coverage, std_coverage) = mean_std(&col(&|r| r.coverage));
    let qs = col(&|r| r.q);
    let (mean_q, std_q) = if qs.iter().all(|q| q.is_finite()) {
        let (m, s) = mean_std(&qs);
        (m, Some(s))
    } else {
        (f64::INFINITY, None)
    };
    let (empty_rate, _) = mean_std(&col(&|r| r.empty_rate));
    let noisy = rows
        .iter()
        .map(|r| r.noisy_coverage)
        .collect::<Option<Vec<f64>>>()
        .map(|v| mean_std(&v));
    MethodSummary {
        method,
        mean_size,
        std_size,
        mean_coverage,
        std_coverage,
        mean_q,
        std_q,
        empty_rate,
        mean_noisy_coverage: noisy.map(|(m, _)| m),
        std_noisy_coverage: noisy.map(|(_, s)| s),
    }
}

/// Runs `config.n_splits` random calibration/test splits of `pool`.
///
/// Test coverage is always measured against clean labels: the pool's
/// `clean_labels` when present, otherwise its observed labels taken as
/// clean (only allowed when noise is re-sampled per split).
pub fn run_repeated_splits(pool: &LabeledPool, config: &SplitConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let n_cal = config.calib_size(pool.n())?;
    let clean: &[usize] = match (&pool.clean_labels, config.resample_noise) {
        (Some(c), _) => c,
        (None, true) => &pool.observed_labels,
        (None, false) => {
            return Err(Error::config(
                "evaluating on pre-corrupted labels needs clean labels for the test side",
            ))
        }
    };
    let mut methods = config.methods.clone();
    methods.sort();
    methods.dedup();
    let prep = Prepared {
        pool,
        clean,
        noise: NoiseModel::new(config.epsilon, pool.k())?,
        n_cal,
        methods,
    };

    let per_split: Vec<Vec<SplitRow>> = (0..config.n_splits)
        .into_par_iter()
        .map(|s| run_split(&prep, config, s))
        .collect::<Result<_>>()?;

    let summaries = prep
        .methods
        .iter()
        .enumerate()
        .map(|(mi, &m)| {
            let rows: Vec<&SplitRow> = per_split.iter().map(|rows| &rows[mi]).collect();
            summarize(m, &rows)
        })
        .collect();

    Ok(ExperimentReport {
        config: config.clone(),
        k: pool.k(),
        n_pool: pool.n(),
        n_calib: n_cal,
        n_test: pool.n() - n_cal,
        methods: summaries,
        raw: config
            .keep_raw
            .then(|| per_split.into_iter().flatten().collect()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub report: ExperimentReport,
}

/// One line of the plot-ready long-form table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LongRow {
    pub epsilon: f64,
    pub method: MethodKind,
    pub metric: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn long_form(&self) -> Vec<LongRow> {
        let mut out = Vec::new();
        for pt in &self.points {
            for s in &pt.report.methods {
                let mut push = |metric, value| {
                    out.push(LongRow { epsilon: pt.epsilon, method: s.method, metric, value })
                };
                push("mean_size", s.mean_size);
                push("std_size", s.std_size);
                push("mean_coverage", s.mean_coverage);
                push("std_coverage", s.std_coverage);
                push("mean_q", s.mean_q);
                push("std_q", s.std_q.unwrap_or(f64::NAN));
                push("empty_rate", s.empty_rate);
            }
        }
        out
    }
}

/// Runs the repeated-split experiment once per noise level.
pub fn noise_sweep(pool: &LabeledPool, eps_grid: &[f64], config: &SplitConfig) -> Result<SweepReport> {
    if eps_grid.is_empty() {
        return Err(Error::config("empty noise-level grid"));
    }
    if let Some(bad) = eps_grid.iter().find(|e| !(0.0..1.0).contains(*e)) {
        return Err(Error::config(format!("sweep noise level {bad} is outside [0, 1)")));
    }
    let points = eps_grid
        .iter()
        .map(|&epsilon| {
            let cfg = SplitConfig { epsilon, ..config.clone() };
            run_repeated_splits(pool, &cfg).map(|report| SweepPoint { epsilon, report })
        })
        .collect::<Result<_>>()?;
    Ok(SweepReport { points })
}
