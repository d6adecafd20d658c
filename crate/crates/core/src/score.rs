//! Conformal score kernels.
//!
//! A score `S(x, y)` measures disagreement between the model output for `x`
//! and a candidate class `y`; larger is worse. Every kernel here takes a
//! validated probability row (see [`crate::probs`]) and is a pure function of
//! its arguments. Randomized scores receive their uniform draw `u` explicitly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default RAPS penalty weight when none is configured.
pub const DEFAULT_RAPS_A: f64 = 0.1;
/// Default RAPS rank offset when none is configured.
pub const DEFAULT_RAPS_B: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreKind {
    /// `1 - p_y`.
    #[serde(rename = "HPS")]
    Hps,
    /// Mass of all classes at least as probable as `y`.
    #[serde(rename = "APS")]
    Aps,
    /// APS plus a rank penalty `a * max(0, rank - b)`.
    #[serde(rename = "RAPS")]
    Raps,
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HPS" => Ok(ScoreKind::Hps),
            "APS" => Ok(ScoreKind::Aps),
            "RAPS" => Ok(ScoreKind::Raps),
            other => Err(Error::config(format!("unknown score kind {other:?}"))),
        }
    }
}

/// Which score to use, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSpec {
    pub kind: ScoreKind,
    #[serde(rename = "a", default = "default_a")]
    pub raps_a: f64,
    #[serde(rename = "b", default = "default_b")]
    pub raps_b: f64,
    #[serde(default)]
    pub randomized: bool,
}

fn default_a() -> f64 {
    DEFAULT_RAPS_A
}

fn default_b() -> f64 {
    DEFAULT_RAPS_B
}

impl ScoreSpec {
    pub fn hps() -> Self {
        Self::new(ScoreKind::Hps)
    }

    pub fn aps() -> Self {
        Self::new(ScoreKind::Aps)
    }

    pub fn raps(a: f64, b: f64) -> Self {
        Self {
            raps_a: a,
            raps_b: b,
            ..Self::new(ScoreKind::Raps)
        }
    }

    pub fn new(kind: ScoreKind) -> Self {
        Self {
            kind,
            raps_a: DEFAULT_RAPS_A,
            raps_b: DEFAULT_RAPS_B,
            randomized: false,
        }
    }

    pub fn randomized(mut self, yes: bool) -> Self {
        self.randomized = yes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ScoreKind::Raps {
            for (name, v) in [("a", self.raps_a), ("b", self.raps_b)] {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::config(format!(
                        "RAPS parameter {name} must be finite and >= 0, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_u(&self, u: Option<f64>) -> Result<f64> {
        match (self.randomized, u) {
            (true, Some(u)) => check_unit(u).map(|_| u),
            (true, None) => Err(Error::input("randomized score needs a uniform draw u")),
            (false, Some(_)) => Err(Error::input(
                "u supplied for a deterministic score specification",
            )),
            (false, None) => Ok(0.0),
        }
    }

    /// `S(x, y)` for this specification. `u` must be given iff the spec is randomized.
    pub fn score(&self, p: &[f64], y: usize, u: Option<f64>) -> Result<f64> {
        check_class(p, y)?;
        self.validate()?;
        let u = self.check_u(u)?;
        Ok(self.score_unchecked(p, y, u))
    }

    pub(crate) fn score_unchecked(&self, p: &[f64], y: usize, u: f64) -> f64 {
        let py = p[y];
        match (self.kind, self.randomized) {
            (ScoreKind::Hps, _) => 1.0 - py,
            (ScoreKind::Aps, false) => mass_at_least(p, py).0,
            (ScoreKind::Aps, true) => mass_above(p, py) + u * py,
            (ScoreKind::Raps, false) => {
                let (mass, nc) = mass_at_least(p, py);
                mass + self.rank_penalty(nc)
            }
            (ScoreKind::Raps, true) => {
                let (_, nc) = mass_at_least(p, py);
                mass_above(p, py) + u * py + self.rank_penalty(nc)
            }
        }
    }

    fn rank_penalty(&self, nc: usize) -> f64 {
        self.raps_a * (nc as f64 - self.raps_b).max(0.0)
    }

    /// Writes the score of every class into `out` (cleared first).
    pub(crate) fn score_all_into(&self, p: &[f64], u: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..p.len()).map(|y| self.score_unchecked(p, y, u)));
    }

    /// Class-averaged score `S(x)` from precomputed class scores.
    pub(crate) fn mean_of(&self, class_scores: &[f64]) -> f64 {
        let k = class_scores.len();
        match self.kind {
            // The HPS class scores always average to (k-1)/k; using the closed
            // form keeps the noise-robust transform an exact monotone map.
            ScoreKind::Hps => (k - 1) as f64 / k as f64,
            _ => class_scores.iter().sum::<f64>() / k as f64,
        }
    }
}

/// Sum of `p_i` over `p_i >= py`, in index order, and the number of such classes.
fn mass_at_least(p: &[f64], py: f64) -> (f64, usize) {
    let mut mass = 0.0;
    let mut count = 0;
    for &pi in p {
        if pi >= py {
            mass += pi;
            count += 1;
        }
    }
    (mass, count)
}

/// Sum of `p_i` over `p_i > py`, in index order.
fn mass_above(p: &[f64], py: f64) -> f64 {
    p.iter().filter(|&&pi| pi > py).sum()
}

fn check_class(p: &[f64], y: usize) -> Result<()> {
    if y >= p.len() {
        return Err(Error::input(format!(
            "class index {y} out of range for k = {}",
            p.len()
        )));
    }
    Ok(())
}

fn check_unit(u: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::input(format!("u = {u} is outside [0, 1]")));
    }
    Ok(())
}

/// `1 - p_y`.
pub fn hps_score(p: &[f64], y: usize) -> Result<f64> {
    ScoreSpec::hps().score(p, y, None)
}

/// Total mass of the classes at least as probable as `y`; ties with `p_y`
/// are included.
pub fn aps_score(p: &[f64], y: usize) -> Result<f64> {
    ScoreSpec::aps().score(p, y, None)
}

/// APS plus `a * max(0, nc - b)` where `nc` counts classes with `p_i >= p_y`.
pub fn raps_score(p: &[f64], y: usize, spec: &ScoreSpec) -> Result<f64> {
    if spec.kind != ScoreKind::Raps {
        return Err(Error::config("raps_score called with a non-RAPS spec"));
    }
    ScoreSpec {
        randomized: false,
        ..*spec
    }
    .score(p, y, None)
}

/// Randomized score: strictly-larger mass plus `u * p_y`, with the RAPS rank
/// penalty added for RAPS specs. HPS has no randomized form and is returned
/// unchanged.
pub fn rand_score(p: &[f64], y: usize, u: f64, spec: &ScoreSpec) -> Result<f64> {
    if !spec.randomized {
        return Err(Error::config("rand_score called with a deterministic spec"));
    }
    spec.score(p, y, Some(u))
}

/// Scores for every class of one sample. A randomized spec uses the same `u`
/// for all classes.
pub fn score_all_classes(p: &[f64], spec: &ScoreSpec, u: Option<f64>) -> Result<Vec<f64>> {
    spec.validate()?;
    let u = spec.check_u(u)?;
    let mut out = Vec::with_capacity(p.len());
    spec.score_all_into(p, u, &mut out);
    Ok(out)
}

/// The class-averaged score `S(x) = (1/k) Σ_i S(x, i)`.
pub fn mean_class_score(p: &[f64], spec: &ScoreSpec, u: Option<f64>) -> Result<f64> {
    let scores = score_all_classes(p, spec, u)?;
    Ok(spec.mean_of(&scores))
}
