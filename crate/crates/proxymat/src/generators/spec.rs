//! Parameter schemas: entry kinds, grids, normalization, and the authored
//! specs for the six generators.
//!
//! Priors (`prior_mean`/`prior_std`) are authored per generator so that
//! heuristic sampling lands in the "looks like a brick wall" region of each
//! parameter space; they are documented data, not fitted statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::canonical_json_hash;

/// Kind and admissible values of one parameter entry.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamKind {
    Continuous { lo: f64, hi: f64 },
    Integer { lo: i64, hi: i64 },
    Categorical { values: Vec<f64> },
}

impl ParamKind {
    pub fn is_discrete(&self) -> bool {
        !matches!(self, ParamKind::Continuous { .. })
    }

    /// Number of grid points for discrete kinds (1 for degenerate entries).
    pub fn grid_len(&self) -> Option<usize> {
        match self {
            ParamKind::Continuous { .. } => None,
            ParamKind::Integer { lo, hi } => Some((hi - lo + 1) as usize),
            ParamKind::Categorical { values } => Some(values.len()),
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        match self {
            ParamKind::Continuous { lo, hi } => x >= *lo && x <= *hi,
            ParamKind::Integer { lo, hi } => {
                x.fract() == 0.0 && x >= *lo as f64 && x <= *hi as f64
            }
            ParamKind::Categorical { values } => values.iter().any(|v| *v == x),
        }
    }

    /// Affine (continuous) or index-affine (discrete) map onto [0,1].
    pub fn normalize(&self, x: f64) -> f64 {
        match self {
            ParamKind::Continuous { lo, hi } => (x - lo) / (hi - lo),
            ParamKind::Integer { lo, hi } => {
                if hi == lo {
                    0.0
                } else {
                    (x - *lo as f64) / (*hi - *lo) as f64
                }
            }
            ParamKind::Categorical { values } => {
                let idx = values.iter().position(|v| *v == x).unwrap_or(0);
                if values.len() <= 1 {
                    0.0
                } else {
                    idx as f64 / (values.len() - 1) as f64
                }
            }
        }
    }

    /// Inverse of [`normalize`]; discrete entries snap to the nearest grid
    /// point (ties round half away from zero, matching `f64::round`).
    pub fn denormalize(&self, u: f64) -> f64 {
        match self {
            ParamKind::Continuous { lo, hi } => lo + u * (hi - lo),
            ParamKind::Integer { lo, hi } => {
                if hi == lo {
                    *lo as f64
                } else {
                    let idx = (u * (*hi - *lo) as f64).round();
                    *lo as f64 + idx.clamp(0.0, (*hi - *lo) as f64)
                }
            }
            ParamKind::Categorical { values } => {
                if values.len() <= 1 {
                    values[0]
                } else {
                    let idx = (u * (values.len() - 1) as f64)
                        .round()
                        .clamp(0.0, (values.len() - 1) as f64) as usize;
                    values[idx]
                }
            }
        }
    }

    /// Raw-unit bounds (categorical entries report index bounds).
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            ParamKind::Continuous { lo, hi } => (*lo, *hi),
            ParamKind::Integer { lo, hi } => (*lo as f64, *hi as f64),
            ParamKind::Categorical { values } => (0.0, (values.len() - 1) as f64),
        }
    }
}

/// One named parameter with its kind and sampling prior.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub key: String,
    #[serde(flatten)]
    pub kind: ParamKind,
    pub prior_mean: f64,
    pub prior_std: f64,
}

/// Schema and priors for one generator's parameter vector. `version_hash`
/// is the content hash over the canonical serialization of (name, entries);
/// it binds datasets, proxies, and graph nodes to an exact schema.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub entries: Vec<ParamEntry>,
    #[serde(default)]
    pub version_hash: String,
}

#[derive(Serialize)]
struct HashableSpec<'a> {
    name: &'a str,
    entries: &'a [ParamEntry],
}

impl ParamSpec {
    pub fn new(name: &str, entries: Vec<ParamEntry>) -> Self {
        let mut s = ParamSpec {
            name: name.to_string(),
            entries,
            version_hash: String::new(),
        };
        s.version_hash = s.compute_hash();
        debug_assert!(s.check_schema().is_ok(), "invalid authored spec {name}");
        s
    }

    /// Hash over canonical serialization of the schema content (the hash
    /// field itself excluded).
    pub fn compute_hash(&self) -> String {
        canonical_json_hash(&HashableSpec {
            name: &self.name,
            entries: &self.entries,
        })
        .expect("spec serialization")
    }

    /// Schema invariants: unique keys, lo < hi, prior mean inside the range.
    pub fn check_schema(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            for other in &self.entries[..i] {
                if other.key == e.key {
                    return Err(Error::Config(format!(
                        "spec {}: duplicate key {}",
                        self.name, e.key
                    )));
                }
            }
            match &e.kind {
                ParamKind::Continuous { lo, hi } => {
                    if !(lo < hi) {
                        return Err(Error::Config(format!(
                            "spec {}: entry {} needs lo < hi",
                            self.name, e.key
                        )));
                    }
                    if e.prior_mean < *lo || e.prior_mean > *hi {
                        return Err(Error::Config(format!(
                            "spec {}: entry {} prior outside range",
                            self.name, e.key
                        )));
                    }
                }
                ParamKind::Integer { lo, hi } => {
                    if !(lo <= hi) {
                        return Err(Error::Config(format!(
                            "spec {}: entry {} needs lo <= hi",
                            self.name, e.key
                        )));
                    }
                    if e.prior_mean < *lo as f64 || e.prior_mean > *hi as f64 {
                        return Err(Error::Config(format!(
                            "spec {}: entry {} prior outside range",
                            self.name, e.key
                        )));
                    }
                }
                ParamKind::Categorical { values } => {
                    if values.is_empty() {
                        return Err(Error::Config(format!(
                            "spec {}: entry {} has empty value set",
                            self.name, e.key
                        )));
                    }
                    if !values.iter().any(|v| *v == e.prior_mean) {
                        return Err(Error::Config(format!(
                            "spec {}: entry {} prior not in value set",
                            self.name, e.key
                        )));
                    }
                }
            }
            if e.prior_std < 0.0 {
                return Err(Error::Config(format!(
                    "spec {}: entry {} negative prior std",
                    self.name, e.key
                )));
            }
        }
        Ok(())
    }

    /// Validate a raw value vector: arity, ranges, grid membership.
    pub fn validate_values(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::DimensionMismatch {
                expected: self.entries.len(),
                got: values.len(),
                context: format!("params for {}", self.name),
            });
        }
        for (e, &v) in self.entries.iter().zip(values) {
            match &e.kind {
                ParamKind::Continuous { lo, hi } => {
                    if !v.is_finite() || v < *lo || v > *hi {
                        return Err(Error::OutOfRange {
                            key: e.key.clone(),
                            value: v,
                            lo: *lo,
                            hi: *hi,
                        });
                    }
                }
                ParamKind::Integer { lo, hi } => {
                    if !v.is_finite() || v < *lo as f64 || v > *hi as f64 {
                        return Err(Error::OutOfRange {
                            key: e.key.clone(),
                            value: v,
                            lo: *lo as f64,
                            hi: *hi as f64,
                        });
                    }
                    if v.fract() != 0.0 {
                        return Err(Error::OffGrid {
                            key: e.key.clone(),
                            value: v,
                        });
                    }
                }
                ParamKind::Categorical { values: set } => {
                    if !set.iter().any(|s| *s == v) {
                        return Err(Error::OffGrid {
                            key: e.key.clone(),
                            value: v,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    /// Raw prior-mean vector (useful as a canonical "typical" sample).
    pub fn prior_means(&self) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| match &e.kind {
                ParamKind::Categorical { .. } => e.prior_mean,
                ParamKind::Integer { .. } => e.prior_mean.round(),
                ParamKind::Continuous { .. } => e.prior_mean,
            })
            .collect()
    }
}

fn cont(key: &str, lo: f64, hi: f64, mean: f64, std: f64) -> ParamEntry {
    // Continuous ranges are authored with lo = 0 (or Sterbenz-safe lo) and a
    // power-of-two span so normalize/denormalize compose to the exact
    // identity in f64; the round-trip invariant is tested bitwise.
    ParamEntry {
        key: key.into(),
        kind: ParamKind::Continuous { lo, hi },
        prior_mean: mean,
        prior_std: std,
    }
}

fn int(key: &str, lo: i64, hi: i64, mean: f64, std: f64) -> ParamEntry {
    ParamEntry {
        key: key.into(),
        kind: ParamKind::Integer { lo, hi },
        prior_mean: mean,
        prior_std: std,
    }
}

// Entry order below is the canonical value-vector order; pattern
// implementations index into it positionally.

pub(super) fn brick_spec() -> ParamSpec {
    ParamSpec::new(
        "brick",
        vec![
            int("x_amount", 1, 16, 4.0, 2.0),
            int("y_amount", 1, 16, 4.0, 2.0),
            cont("offset", 0.0, 1.0, 0.5, 0.15),
            cont("gap", 0.0, 1.0, 0.12, 0.05),
            cont("bevel", 0.0, 0.5, 0.08, 0.05),
            cont("jitter", 0.0, 1.0, 0.25, 0.15),
        ],
    )
}

pub(super) fn tile_paraboloid_spec() -> ParamSpec {
    ParamSpec::new(
        "tile_paraboloid",
        vec![
            int("x_amount", 1, 16, 3.0, 1.5),
            int("y_amount", 1, 16, 3.0, 1.5),
            cont("gap", 0.0, 0.5, 0.1, 0.05),
            cont("jitter", 0.0, 1.0, 0.15, 0.1),
        ],
    )
}

pub(super) fn tile_brick_spec() -> ParamSpec {
    ParamSpec::new(
        "tile_brick",
        vec![
            int("x_amount", 1, 16, 4.0, 2.0),
            int("y_amount", 1, 16, 4.0, 2.0),
            cont("gap", 0.0, 1.0, 0.1, 0.05),
            cont("bevel", 0.0, 0.5, 0.1, 0.06),
        ],
    )
}

pub(super) fn stripe_spec() -> ParamSpec {
    ParamSpec::new(
        "stripe",
        vec![
            int("count", 1, 16, 5.0, 2.0),
            ParamEntry {
                key: "angle".into(),
                kind: ParamKind::Categorical {
                    values: vec![0.0, 45.0, 90.0, 135.0],
                },
                prior_mean: 0.0,
                // categorical priors are in index units
                prior_std: 1.0,
            },
            cont("duty", 0.0, 1.0, 0.5, 0.15),
            cont("softness", 0.0, 0.5, 0.1, 0.08),
            cont("phase", 0.0, 1.0, 0.5, 0.25),
        ],
    )
}

pub(super) fn scratches_spec() -> ParamSpec {
    ParamSpec::new(
        "scratches",
        vec![
            int("count", 1, 64, 12.0, 5.0),
            // orientation in turns: 0.5 = 180 degrees
            cont("angle", 0.0, 0.5, 0.125, 0.08),
            cont("spread", 0.0, 1.0, 0.25, 0.15),
            cont("length", 0.0, 0.5, 0.25, 0.1),
            cont("width", 0.0, 0.0625, 0.015, 0.006),
            cont("depth", 0.0, 1.0, 0.8, 0.15),
        ],
    )
}

pub(super) fn arc_pavement_spec() -> ParamSpec {
    ParamSpec::new(
        "arc_pavement",
        vec![
            int("x_amount", 1, 8, 3.0, 1.0),
            int("y_amount", 1, 8, 3.0, 1.0),
            int("rings", 2, 8, 4.0, 1.5),
            int("wedges", 2, 16, 8.0, 3.0),
            cont("gap", 0.0, 0.5, 0.08, 0.04),
            cont("jitter", 0.0, 1.0, 0.2, 0.1),
        ],
    )
}
