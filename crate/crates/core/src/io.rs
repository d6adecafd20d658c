//! Dataset CSV files, the JSON run configuration, and output files.
//!
//! Dataset layout: a header row, then one row per sample with the class
//! probabilities `p_0 .. p_{k-1}`, an optional `label` column and an
//! optional `clean_label` column after it. `k` is the number of columns
//! before `label` (or all columns when there is no label).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrate::{CalibrationResult, MethodKind};
use crate::error::{Error, Result};
use crate::eval::{ExperimentReport, SplitConfig, SweepPoint};
use crate::pool::LabeledPool;
use crate::probs::{softmax_in_place, validate_row, ProbMatrix};
use crate::score::{ScoreKind, ScoreSpec};
use crate::synth::SynthConfig;

/// Parsed dataset file; labels are optional so that unlabeled test files
/// can be fed to `predict`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub probs: ProbMatrix,
    pub labels: Option<Vec<usize>>,
    pub clean_labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn into_pool(self) -> Result<LabeledPool> {
        let labels = self
            .labels
            .ok_or_else(|| Error::input("dataset has no label column"))?;
        let pool = LabeledPool::new(self.probs, labels)?;
        match self.clean_labels {
            Some(c) => pool.with_clean_labels(c),
            None => Ok(pool),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.to_path_buf(), source },
        other => Error::Dataset { path: path.to_path_buf(), line, message: format!("{other:?}") },
    }
}

/// Reads a dataset. With `softmax`, probability columns are treated as logits.
pub fn read_dataset(path: &Path, softmax: bool) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let bad = |line: usize, message: String| Error::Dataset { path: path.to_path_buf(), line, message };

    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let label_col = header.iter().position(|h| h == "label");
    let k = label_col.unwrap_or(header.len());
    let clean_col = match (label_col, header.len() - k) {
        (None, _) | (Some(_), 1) => None,
        (Some(l), 2) if &header[l + 1] == "clean_label" => Some(l + 1),
        _ => {
            return Err(bad(1, "expected header p_0..p_{k-1},label[,clean_label]".into()));
        }
    };
    if k < 2 {
        return Err(bad(1, format!("need at least 2 probability columns, found {k}")));
    }

    let mut flat = Vec::new();
    let mut labels = label_col.map(|_| Vec::new());
    let mut clean = clean_col.map(|_| Vec::new());
    let mut row = vec![0.0; k];
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(csv_err(path, e)),
        }
        let line = record.position().map_or(0, |p| p.line() as usize);
        for (j, v) in row.iter_mut().enumerate() {
            *v = record[j]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(line, format!("column {j}: {:?} is not a finite number", &record[j])))?;
        }
        if softmax {
            softmax_in_place(&mut row);
        }
        validate_row(&mut row).map_err(|e| bad(line, e.to_string()))?;
        flat.extend_from_slice(&row);

        let parse_label = |col: usize| -> Result<usize> {
            record[col]
                .parse::<usize>()
                .ok()
                .filter(|&y| y < k)
                .ok_or_else(|| bad(line, format!("{}: {:?} is not a class index < {k}", &header[col], &record[col])))
        };
        if let (Some(col), Some(v)) = (label_col, labels.as_mut()) {
            v.push(parse_label(col)?);
        }
        if let (Some(col), Some(v)) = (clean_col, clean.as_mut()) {
            v.push(parse_label(col)?);
        }
    }
    if flat.is_empty() {
        return Err(bad(1, "dataset has no rows".into()));
    }
    Ok(Dataset { probs: ProbMatrix::from_flat(k, flat)?, labels, clean_labels: clean })
}

/// Writes a pool in the dataset format. Probabilities use shortest
/// round-trip decimal formatting, so reading back yields identical bits.
pub fn write_dataset(path: &Path, pool: &LabeledPool) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..pool.k()).map(|i| format!("p_{i}")).collect();
    header.push("label".into());
    if pool.clean_labels.is_some() {
        header.push("clean_label".into());
    }
    let map = |e: csv::Error| csv_err(path, e);
    wtr.write_record(&header).map_err(map)?;
    let mut fields = Vec::with_capacity(header.len());
    for (i, p) in pool.probs.rows().enumerate() {
        fields.clear();
        fields.extend(p.iter().map(|v| v.to_string()));
        fields.push(pool.observed_labels[i].to_string());
        if let Some(c) = &pool.clean_labels {
            fields.push(c[i].to_string());
        }
        wtr.write_record(&fields).map_err(map)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    write_atomic(path, &bytes)
}

/// Writes via a temporary file in the same directory and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn default_alpha() -> f64 {
    0.1
}

fn default_score() -> ScoreSpec {
    ScoreSpec::new(ScoreKind::Aps)
}

fn default_methods() -> Vec<MethodKind> {
    MethodKind::ALL.to_vec()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitsBlock {
    #[serde(default = "default_n_splits")]
    pub n_splits: usize,
    #[serde(default = "default_fraction")]
    pub calib_fraction: f64,
}

fn default_n_splits() -> usize {
    1000
}

fn default_fraction() -> f64 {
    0.5
}

impl Default for SplitsBlock {
    fn default() -> Self {
        Self { n_splits: default_n_splits(), calib_fraction: default_fraction() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub eps_grid: Vec<f64>,
}

/// The JSON run configuration shared by all subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_score")]
    pub score: ScoreSpec,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodKind>,
    #[serde(default)]
    pub splits: SplitsBlock,
    #[serde(default)]
    pub sweep: Option<SweepBlock>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub csv_output: Option<PathBuf>,
    #[serde(default)]
    pub force_nonempty: bool,
    /// Dataset probability columns are logits.
    #[serde(default)]
    pub softmax: bool,
    #[serde(default)]
    pub noisy_test: bool,
    #[serde(default = "default_true")]
    pub resample_noise: bool,
    #[serde(default)]
    pub keep_raw: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all RunConfig fields have defaults")
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset, &self.synth) {
            (Some(_), Some(_)) => return Err(Error::config("give either dataset or synth, not both")),
            (None, None) => return Err(Error::config("no dataset or synth block given")),
            _ => {}
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::config(format!("epsilon must lie in [0, 1), got {}", self.epsilon)));
        }
        self.score.validate()?;
        if self.methods.is_empty() {
            return Err(Error::config("methods list is empty"));
        }
        if self.splits.n_splits == 0 {
            return Err(Error::config("splits.n_splits must be at least 1"));
        }
        if !(self.splits.calib_fraction > 0.0 && self.splits.calib_fraction < 1.0) {
            return Err(Error::config("splits.calib_fraction must lie in (0, 1)"));
        }
        if let Some(sw) = &self.sweep {
            if sw.eps_grid.is_empty() || sw.eps_grid.iter().any(|e| !(0.0..1.0).contains(e)) {
                return Err(Error::config("sweep.eps_grid must be non-empty with values in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Loads the configured dataset or generates the synthetic pool.
    pub fn load_pool(&self) -> Result<LabeledPool> {
        match (&self.dataset, &self.synth) {
            (Some(path), _) => read_dataset(path, self.softmax)?.into_pool(),
            (None, Some(synth)) => Ok(crate::synth::generate(synth)?.pool),
            (None, None) => Err(Error::config("no dataset or synth block given")),
        }
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            n_splits: self.splits.n_splits,
            calib_fraction: self.splits.calib_fraction,
            alpha: self.alpha,
            epsilon: self.epsilon,
            score_spec: self.score,
            methods: self.methods.clone(),
            master_seed: self.master_seed,
            resample_noise: self.resample_noise,
            noisy_test: self.noisy_test,
            force_nonempty: self.force_nonempty,
            keep_raw: self.keep_raw,
        }
    }
}

/// Calibration output: the result plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    #[serde(flatten)]
    pub result: CalibrationResult,
    pub config: Option<RunConfig>,
}

/// Experiment output. `sweep` holds one block per noise level when a sweep
/// was requested, otherwise `report` holds the single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentFile {
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub report: Option<ExperimentReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sweep: Option<Vec<SweepPoint>>,
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

/// `method,metric,mean,std` rows for a single experiment.
pub fn summary_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("method,metric,mean,std\n");
    for s in &report.methods {
        let rows = [
            ("size", s.mean_size, Some(s.std_size)),
            ("coverage", s.mean_coverage, Some(s.std_coverage)),
            ("q", s.mean_q, s.std_q),
            ("empty_rate", s.empty_rate, None),
        ];
        for (metric, mean, std) in rows {
            let std = std.map_or(String::new(), |v| v.to_string());
            out.push_str(&format!("{},{metric},{},{std}\n", s.method, fmt_f64(mean)));
        }
        if let (Some(m), Some(sd)) = (s.mean_noisy_coverage, s.std_noisy_coverage) {
            out.push_str(&format!("{},noisy_coverage,{m},{sd}\n", s.method));
        }
    }
    out
}

/// `epsilon,method,metric,value` rows for a sweep.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let sweep = crate::eval::SweepReport { points: points.to_vec() };
    let mut out = String::from("epsilon,method,metric,value\n");
    for r in sweep.long_form() {
        out.push_str(&format!("{},{},{},{}\n", r.epsilon, r.method, r.metric, fmt_f64(r.value)));
    }
    out
}

pub fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "+inf".into()
    } else if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}
