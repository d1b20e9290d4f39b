//! Deterministic dataset construction: `(θ, I)` pairs rendered by the
//! reference generators, stored as 16-bit grayscale PNG shards plus a
//! manifest. The manifest is written last and atomically, so its presence
//! implies a complete dataset.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{self, ParamVector};
use crate::paramspace::{normalize, sample_params, SampleConfig};
use crate::util::imageio::{gray16_pixel_hash, load_gray16, save_gray16};
use crate::util::write_json_pretty;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetRecord {
    pub index: usize,
    pub raw_params: Vec<f64>,
    pub normalized_params: Vec<f64>,
    pub seed: u64,
    /// Path relative to the dataset directory.
    pub image_path: String,
    /// SHA-256 of the quantized pixel stream.
    pub pixel_sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub generator: String,
    pub spec_hash: String,
    pub records: Vec<DatasetRecord>,
    pub created_with: SampleConfig,
}

impl DatasetManifest {
    pub fn resolution(&self) -> (usize, usize) {
        self.created_with.resolution
    }

    pub fn record_param_vector(&self, index: usize) -> ParamVector {
        let r = &self.records[index];
        ParamVector {
            spec_hash: self.spec_hash.clone(),
            values: r.raw_params.clone(),
            seed: r.seed,
        }
    }
}

fn shard_rel_path(index: usize, shard_size: usize) -> String {
    format!("shard_{:04}/img_{:08}.png", index / shard_size, index)
}

/// Build (or resume) a dataset in `out_dir`.
///
/// Rendering is sharded across workers with pre-assigned indices, so the
/// output is order-deterministic regardless of scheduling; re-running with
/// the same config reproduces every byte. An existing manifest built from the
/// same config short-circuits the build; a manifest from a different config
/// is an error.
pub fn build_dataset(config: &SampleConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let spec = generators::generator_spec(&config.generator)?;

    let manifest_path = out_dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let existing = load_manifest(out_dir)?;
        if existing.created_with != *config {
            return Err(Error::Data(format!(
                "{} holds a dataset built from a different config",
                out_dir.display()
            )));
        }
        verify_manifest(out_dir, &existing, false)?;
        return Ok(existing);
    }

    let records: Vec<DatasetRecord> = (0..config.count)
        .into_par_iter()
        .map(|index| -> Result<DatasetRecord> {
            let params = sample_params(spec, config, index)?;
            let img = generators::evaluate_generator(&config.generator, &params, config.resolution)?;
            let rel = shard_rel_path(index, config.shard_size);
            save_gray16(&out_dir.join(&rel), &img.pixels)?;
            Ok(DatasetRecord {
                index,
                normalized_params: normalize(&params, spec)?,
                raw_params: params.values,
                seed: params.seed,
                image_path: rel,
                pixel_sha256: gray16_pixel_hash(&img.pixels),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        generator: config.generator.clone(),
        spec_hash: spec.version_hash.clone(),
        records,
        created_with: config.clone(),
    };
    write_json_pretty(&manifest_path, &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = crate::util::read_json(&dir.join(MANIFEST_FILE))?;
    let spec = generators::generator_spec(&manifest.generator)?;
    if manifest.spec_hash != spec.version_hash {
        return Err(Error::SpecHashMismatch {
            expected: spec.version_hash.clone(),
            got: manifest.spec_hash.clone(),
        });
    }
    Ok(manifest)
}

/// Check manifest completeness. With `deep`, every image is decoded and its
/// resolution, pixel checksum, and normalization are re-verified; otherwise
/// only structure and file existence are checked.
pub fn verify_manifest(dir: &Path, manifest: &DatasetManifest, deep: bool) -> Result<()> {
    let spec = generators::generator_spec(&manifest.generator)?;
    if manifest.records.len() != manifest.created_with.count {
        return Err(Error::Data("manifest record count mismatch".into()));
    }
    for (i, r) in manifest.records.iter().enumerate() {
        if r.index != i {
            return Err(Error::Data(format!(
                "manifest indices not contiguous at {i}"
            )));
        }
        let path = dir.join(&r.image_path);
        if !path.exists() {
            return Err(Error::Data(format!("missing image {}", r.image_path)));
        }
        if deep {
            let img = load_gray16(&path)?;
            if img.dim() != manifest.created_with.resolution {
                return Err(Error::Data(format!(
                    "record {i}: resolution {:?} != {:?}",
                    img.dim(),
                    manifest.created_with.resolution
                )));
            }
            if gray16_pixel_hash(&img) != r.pixel_sha256 {
                return Err(Error::Data(format!("record {i}: pixel checksum mismatch")));
            }
            let pv = manifest.record_param_vector(i);
            let norm = normalize(&pv, spec)?;
            if norm != r.normalized_params {
                return Err(Error::Data(format!(
                    "record {i}: stored normalization disagrees with normalize(raw)"
                )));
            }
        }
    }
    Ok(())
}

/// Load all images of a manifest into memory, in record order.
pub fn dataset_images(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<Array2<f64>>> {
    let paths: Vec<PathBuf> = manifest
        .records
        .iter()
        .map(|r| dir.join(&r.image_path))
        .collect();
    paths
        .par_iter()
        .map(|p| load_gray16(p))
        .collect::<Result<Vec<_>>>()
}
