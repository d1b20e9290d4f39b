//! Parameter-space utilities shared by proxy training and optimization:
//! unit-cube normalization, heuristic prior sampling, and deterministic
//! dataset construction.

mod dataset;

pub use dataset::{
    build_dataset, dataset_images, load_manifest, verify_manifest, DatasetManifest, DatasetRecord,
    MANIFEST_FILE,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{self, ParamKind, ParamSpec, ParamVector};
use crate::util::rng::{domain, substream};

/// How parameter draws are produced.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Per-entry Gaussian around the authored prior, clipped to the range,
    /// then snapped to the grid for discrete entries.
    IndependentGaussianClipped,
    /// Uniform over the range (continuous) or the grid (discrete).
    UniformInRange,
}

/// Configuration of one dataset build.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub generator: String,
    pub count: usize,
    pub resolution: (usize, usize),
    pub sampling: SamplingMode,
    pub seed: u64,
    pub shard_size: usize,
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::Config("count must be >= 1".into()));
        }
        if self.shard_size < 1 {
            return Err(Error::Config("shard_size must be >= 1".into()));
        }
        let (h, w) = self.resolution;
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(Error::Config(format!(
                "resolution must be power-of-two per side (synthesis network constraint), got {h}x{w}"
            )));
        }
        generators::generator_spec(&self.generator)?;
        Ok(())
    }
}

/// The full-scale regime the desk-scale defaults stand in for.
pub fn full_scale_preset(generator: &str) -> SampleConfig {
    SampleConfig {
        generator: generator.to_string(),
        count: 300_000,
        resolution: (256, 256),
        sampling: SamplingMode::IndependentGaussianClipped,
        seed: 0,
        shard_size: 1000,
    }
}

/// Map a parameter vector onto the unit cube (affine for continuous entries,
/// index-affine for discrete ones). Bijective with [`denormalize`] up to grid
/// snapping.
pub fn normalize(params: &ParamVector, spec: &ParamSpec) -> Result<Vec<f64>> {
    if params.spec_hash != spec.version_hash {
        return Err(Error::SpecHashMismatch {
            expected: spec.version_hash.clone(),
            got: params.spec_hash.clone(),
        });
    }
    spec.validate_values(&params.values)?;
    Ok(spec
        .entries
        .iter()
        .zip(&params.values)
        .map(|(e, &v)| e.kind.normalize(v))
        .collect())
}

/// Inverse of [`normalize`]: continuous entries map affinely, discrete
/// entries snap to the nearest grid point.
pub fn denormalize(u: &[f64], spec: &ParamSpec) -> Result<Vec<f64>> {
    if u.len() != spec.entry_count() {
        return Err(Error::DimensionMismatch {
            expected: spec.entry_count(),
            got: u.len(),
            context: format!("normalized params for {}", spec.name),
        });
    }
    for (e, &c) in spec.entries.iter().zip(u) {
        if !(0.0..=1.0).contains(&c) || !c.is_finite() {
            return Err(Error::OutOfRange {
                key: e.key.clone(),
                value: c,
                lo: 0.0,
                hi: 1.0,
            });
        }
    }
    Ok(spec
        .entries
        .iter()
        .zip(u)
        .map(|(e, &c)| e.kind.denormalize(c))
        .collect())
}

/// Grid-snap a normalized vector in place (discrete entries only); used when
/// switching a graph node back to its original generator.
pub fn snap_normalized(u: &[f64], spec: &ParamSpec) -> Result<Vec<f64>> {
    let raw = denormalize(u, spec)?;
    Ok(spec
        .entries
        .iter()
        .zip(&raw)
        .map(|(e, &v)| e.kind.normalize(v))
        .collect())
}

/// Maximum validity-resampling attempts before accepting the draw as-is.
const MAX_ATTEMPTS: u64 = 32;

/// Deterministic heuristic parameter draw for `(config.seed, index)`.
///
/// Gaussian draws are clipped to the range and snapped to the grid; draws
/// that fail the generator's plausibility predicate are resampled with an
/// incremented sub-seed. The pattern seed for stochastic content is drawn
/// from the same stream.
pub fn sample_params(spec: &ParamSpec, config: &SampleConfig, index: usize) -> Result<ParamVector> {
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = substream(config.seed, domain::SAMPLE, &[index as u64, attempt]);
        let values: Vec<f64> = spec
            .entries
            .iter()
            .map(|e| match config.sampling {
                SamplingMode::IndependentGaussianClipped => {
                    let z: f64 = rng.sample(StandardNormal);
                    match &e.kind {
                        ParamKind::Continuous { lo, hi } => {
                            (e.prior_mean + e.prior_std * z).clamp(*lo, *hi)
                        }
                        ParamKind::Integer { lo, hi } => (e.prior_mean + e.prior_std * z)
                            .clamp(*lo as f64, *hi as f64)
                            .round()
                            .clamp(*lo as f64, *hi as f64),
                        ParamKind::Categorical { values } => {
                            let prior_idx = values
                                .iter()
                                .position(|v| *v == e.prior_mean)
                                .unwrap_or(0) as f64;
                            let idx = (prior_idx + e.prior_std * z)
                                .round()
                                .clamp(0.0, (values.len() - 1) as f64)
                                as usize;
                            values[idx]
                        }
                    }
                }
                SamplingMode::UniformInRange => {
                    let r: f64 = rng.random();
                    match &e.kind {
                        ParamKind::Continuous { lo, hi } => lo + (hi - lo) * r,
                        ParamKind::Integer { lo, hi } => {
                            let n = (hi - lo + 1) as f64;
                            (*lo as f64 + (r * n).floor()).min(*hi as f64)
                        }
                        ParamKind::Categorical { values } => {
                            let idx =
                                ((r * values.len() as f64).floor() as usize).min(values.len() - 1);
                            values[idx]
                        }
                    }
                }
            })
            .collect();
        let seed: u64 = rng.random();
        let params = ParamVector {
            spec_hash: spec.version_hash.clone(),
            values,
            seed,
        };
        if generators::is_plausible(&spec.name, &params)? {
            return Ok(params);
        }
        last = Some(params);
    }
    Ok(last.expect("at least one attempt"))
}

/// One clipped-Gaussian prior draw outside any dataset context (used by the
/// stage-II initialization search). Deterministic in (seed, index) and
/// subject to the same validity resampling as dataset builds.
pub fn sample_prior(spec: &ParamSpec, seed: u64, index: u64) -> Result<ParamVector> {
    let config = SampleConfig {
        generator: spec.name.clone(),
        count: usize::MAX,
        resolution: (64, 64),
        sampling: SamplingMode::IndependentGaussianClipped,
        seed,
        shard_size: 1,
    };
    sample_params(spec, &config, index as usize)
}

#[cfg(test)]
mod tests;
