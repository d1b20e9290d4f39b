//! The differentiable proxy `Ĝ(θ)`: a deterministic, parameter-conditioned
//! convolutional generator whose forward map approximates a pattern
//! generator and whose input-parameter gradients drive optimization.
//!
//! Architecture: a fully connected mapping stack embeds the normalized
//! parameter vector into a latent `w`; a synthesis stack starts from a
//! learned constant base map and runs modulated 3x3 convolutions
//! (per-input-channel style scale, demodulated) through nearest-neighbor
//! upsampling levels up to the output resolution, with circular padding
//! throughout. There are no noise inputs anywhere: the network is a
//! function, not a distribution. A 1x1 modulated projection (no
//! demodulation) and a sigmoid produce the single-channel output in (0,1).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{GeneratorImage, ParamSpec};
use crate::tensor::conv::PadMode;
use crate::tensor::{Tape, Tensor};
use crate::util::rng::{domain, substream};
use crate::util::{blob, file_sha256, read_json, write_json_pretty};

/// Synthesis/mapping hyperparameters. The desk-scale default is latent 128,
/// mapping depth 4, 4x4 learned constant, and a 64-to-16 channel ramp.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ProxyArch {
    pub param_dim: usize,
    pub latent_dim: usize,
    pub mapping_layers: usize,
    pub base_res: usize,
    pub base_channels: usize,
    pub min_channels: usize,
    pub output_resolution: (usize, usize),
}

impl ProxyArch {
    pub fn desk_default(param_dim: usize, resolution: usize) -> Self {
        ProxyArch {
            param_dim,
            latent_dim: 128,
            mapping_layers: 4,
            base_res: 4,
            base_channels: 64,
            min_channels: 16,
            output_resolution: (resolution, resolution),
        }
    }

    /// Smaller variant for quick experiments at low resolutions.
    pub fn compact(param_dim: usize, resolution: usize) -> Self {
        ProxyArch {
            param_dim,
            latent_dim: 64,
            mapping_layers: 3,
            base_res: 4,
            base_channels: 32,
            min_channels: 8,
            output_resolution: (resolution, resolution),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.output_resolution;
        if h != w || !h.is_power_of_two() || h < self.base_res * 2 {
            return Err(Error::Config(format!(
                "output resolution must be a square power of two of at least {}, got {h}x{w}",
                self.base_res * 2
            )));
        }
        if !self.base_res.is_power_of_two() || self.param_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("invalid proxy architecture".into()));
        }
        Ok(())
    }

    /// Number of upsampling levels from the base map to the output.
    pub fn levels(&self) -> usize {
        (self.output_resolution.0 / self.base_res).trailing_zeros() as usize
    }

    /// Channel counts per level 0..=levels: geometric ramp from
    /// `base_channels` down to `min_channels`, rounded to multiples of 4.
    pub fn channel_schedule(&self) -> Vec<usize> {
        let levels = self.levels();
        (0..=levels)
            .map(|l| {
                let t = l as f64 / levels as f64;
                let ch = self.base_channels as f64
                    * (self.min_channels as f64 / self.base_channels as f64).powf(t);
                (((ch / 4.0).round() as usize).max(1)) * 4
            })
            .collect()
    }
}

/// Fidelity summary produced by held-out evaluation; stored in the model
/// metadata and echoed into reports.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
pub struct FidelityReport {
    pub mean_l1: f64,
    pub p50_l1: f64,
    pub p90_l1: f64,
    pub p99_l1: f64,
    pub mean_feature_distance: f64,
    /// (record index, L1) of the worst five held-out samples.
    pub worst: Vec<(usize, f64)>,
    pub heldout_count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct ProxyMetadata {
    pub training_run: Option<String>,
    pub train_config: Option<serde_json::Value>,
    pub fidelity: Option<FidelityReport>,
    /// Pixel hashes of the training records, used to refuse overlapping
    /// held-out evaluations.
    pub training_record_hashes: Vec<String>,
}

/// A trained (or freshly initialized) differentiable proxy bound to one
/// generator's parameter spec. Immutable once loaded; forward passes are
/// pure and safe to run concurrently from independent tapes.
pub struct ProxyModel {
    pub arch: ProxyArch,
    pub spec: ParamSpec,
    pub metadata: ProxyMetadata,
    weights: BTreeMap<String, Arc<ArrayD<f64>>>,
}

fn he_normal(
    rng: &mut rand_chacha::ChaCha12Rng,
    shape: &[usize],
    fan_in: usize,
    gain: f64,
) -> ArrayD<f64> {
    let std = gain / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

impl ProxyModel {
    /// Seeded random initialization. Style biases start at one (styles are
    /// multiplicative), everything else near zero mean.
    pub fn new_seeded(arch: ProxyArch, spec: ParamSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        if arch.param_dim != spec.entry_count() {
            return Err(Error::DimensionMismatch {
                expected: spec.entry_count(),
                got: arch.param_dim,
                context: "proxy arch input dimension vs spec".into(),
            });
        }
        let mut weights = BTreeMap::new();
        let mut layer_seed = 0u64;
        let rng = |tag: &mut u64| {
            let r = substream(seed, domain::WEIGHT_INIT, &[*tag]);
            *tag += 1;
            r
        };

        let mut din = arch.param_dim;
        for i in 0..arch.mapping_layers {
            let mut r = rng(&mut layer_seed);
            weights.insert(
                format!("mapping.{i}.weight"),
                Arc::new(he_normal(&mut r, &[arch.latent_dim, din], din, 1.0)),
            );
            weights.insert(
                format!("mapping.{i}.bias"),
                Arc::new(ArrayD::zeros(IxDyn(&[arch.latent_dim]))),
            );
            din = arch.latent_dim;
        }

        let ch = arch.channel_schedule();
        {
            let mut r = rng(&mut layer_seed);
            weights.insert(
                "const_base".into(),
                Arc::new(he_normal(
                    &mut r,
                    &[ch[0], arch.base_res, arch.base_res],
                    1,
                    0.5,
                )),
            );
        }
        for l in 0..=arch.levels() {
            let cin = if l == 0 { ch[0] } else { ch[l - 1] };
            let cout = ch[l];
            let mut r = rng(&mut layer_seed);
            weights.insert(
                format!("layer{l}.conv.weight"),
                Arc::new(he_normal(&mut r, &[cout, cin, 3, 3], cin * 9, 2f64.sqrt())),
            );
            weights.insert(
                format!("layer{l}.conv.bias"),
                Arc::new(ArrayD::zeros(IxDyn(&[cout]))),
            );
            let mut r = rng(&mut layer_seed);
            weights.insert(
                format!("layer{l}.style.weight"),
                Arc::new(he_normal(&mut r, &[cin, arch.latent_dim], arch.latent_dim, 0.2)),
            );
            weights.insert(
                format!("layer{l}.style.bias"),
                Arc::new(ArrayD::ones(IxDyn(&[cin]))),
            );
        }
        let c_last = *ch.last().unwrap();
        let mut r = rng(&mut layer_seed);
        weights.insert(
            "to_out.weight".into(),
            Arc::new(he_normal(&mut r, &[1, c_last, 1, 1], c_last, 1.0)),
        );
        weights.insert("to_out.bias".into(), Arc::new(ArrayD::zeros(IxDyn(&[1]))));
        let mut r = rng(&mut layer_seed);
        weights.insert(
            "to_out.style.weight".into(),
            Arc::new(he_normal(&mut r, &[c_last, arch.latent_dim], arch.latent_dim, 0.2)),
        );
        weights.insert(
            "to_out.style.bias".into(),
            Arc::new(ArrayD::ones(IxDyn(&[c_last]))),
        );

        Ok(ProxyModel {
            arch,
            spec,
            metadata: ProxyMetadata::default(),
            weights,
        })
    }

    pub fn weight_names(&self) -> Vec<String> {
        self.weights.keys().cloned().collect()
    }

    pub fn weight(&self, name: &str) -> Option<&Arc<ArrayD<f64>>> {
        self.weights.get(name)
    }

    /// Replace a weight (training updates). The shape must not change.
    pub fn set_weight(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let slot = self
            .weights
            .get_mut(name)
            .ok_or_else(|| Error::Data(format!("unknown weight {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::DimensionMismatch {
                expected: slot.len(),
                got: value.len(),
                context: format!("weight {name}"),
            });
        }
        *slot = Arc::new(value);
        Ok(())
    }

    /// Bind all weights onto a tape (as trainable vars or constants) so a
    /// forward pass can be built against them.
    pub fn bind_weights(&self, tape: &Tape, trainable: bool) -> BTreeMap<String, Tensor> {
        self.weights
            .iter()
            .map(|(k, v)| {
                let t = if trainable {
                    tape.var_shared(Arc::clone(v))
                } else {
                    tape.constant_shared(Arc::clone(v))
                };
                (k.clone(), t)
            })
            .collect()
    }

    /// Synthesis forward pass against bound weight tensors.
    /// `u` is the normalized parameter vector, shape [param_dim].
    pub fn forward_bound(
        &self,
        u: &Tensor,
        bound: &BTreeMap<String, Tensor>,
    ) -> Result<Tensor> {
        if u.shape() != [self.arch.param_dim] {
            return Err(Error::DimensionMismatch {
                expected: self.arch.param_dim,
                got: u.numel(),
                context: "proxy input".into(),
            });
        }
        let g = |name: &str| -> &Tensor { &bound[name] };

        // mapping stack: FC + leaky ReLU
        let mut w = u.clone();
        for i in 0..self.arch.mapping_layers {
            w = w
                .linear(
                    g(&format!("mapping.{i}.weight")),
                    g(&format!("mapping.{i}.bias")),
                )
                .leaky_relu(0.2);
        }

        let ch = self.arch.channel_schedule();
        let mut x = g("const_base").clone();
        for l in 0..=self.arch.levels() {
            if l > 0 {
                x = x.upsample2();
            }
            let style = w.linear(
                g(&format!("layer{l}.style.weight")),
                g(&format!("layer{l}.style.bias")),
            );
            x = modulated_conv(
                &x,
                g(&format!("layer{l}.conv.weight")),
                Some(g(&format!("layer{l}.conv.bias"))),
                &style,
                true,
            )
            .leaky_relu(0.2);
            debug_assert_eq!(x.shape()[0], ch[l]);
        }

        let style = w.linear(g("to_out.style.weight"), g("to_out.style.bias"));
        let pre = modulated_conv(&x, g("to_out.weight"), Some(g("to_out.bias")), &style, false);
        Ok(pre.sigmoid())
    }

    /// Differentiable forward pass on an existing tape; weights enter as
    /// constants, gradients flow to `u`.
    pub fn forward_t(&self, u: &Tensor) -> Result<Tensor> {
        let bound = self.bind_weights(u.tape(), false);
        self.forward_bound(u, &bound)
    }

    /// Plain evaluation: normalized parameters in, pattern map out.
    pub fn forward(&self, u: &[f64]) -> Result<GeneratorImage> {
        let tape = Tape::new();
        let ut = tape.var(ArrayD::from_shape_vec(IxDyn(&[u.len()]), u.to_vec()).unwrap());
        let out = self.forward_t(&ut)?;
        let v = out.value();
        let (h, w) = (
            self.arch.output_resolution.0,
            self.arch.output_resolution.1,
        );
        let mut px = ndarray::Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                px[[y, x]] = v[[0, y, x]];
            }
        }
        Ok(GeneratorImage { pixels: px })
    }

    fn check_finite(&self) -> Result<()> {
        for (name, w) in &self.weights {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite weight in {name}")));
            }
        }
        Ok(())
    }
}

/// Style-modulated convolution: weights are scaled per input channel by the
/// style vector, then (optionally) demodulated so every output channel has
/// unit expected norm. Circular padding, stride 1.
fn modulated_conv(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    style: &Tensor,
    demodulate: bool,
) -> Tensor {
    let mut w = weight.mul_axis(style, 1);
    if demodulate {
        let d = w.sqr().sum_but_axis(0).add_c(1e-8).pow_c(-0.5);
        w = w.mul_axis(&d, 0);
    }
    x.conv2d(&w, bias, 1, PadMode::Circular)
}

// ---------------------------------------------------------------------------
// Checkpoint format: weight blob + sidecar JSON
// ---------------------------------------------------------------------------

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    arch: ProxyArch,
    spec: ParamSpec,
    spec_hash: String,
    blob_sha256: String,
    metadata: ProxyMetadata,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("proxy");
    path.with_file_name(format!("{name}.json"))
}

/// Persist a proxy: `<path>` holds the opaque weight blob, `<path>.json` the
/// structured sidecar. The saved forward map reproduces bitwise on load.
pub fn save_proxy(model: &ProxyModel, path: &Path) -> Result<()> {
    model.check_finite()?;
    let mut tensors = blob::TensorMap::new();
    for (k, v) in &model.weights {
        tensors.insert(k.clone(), v.as_ref().clone());
    }
    blob::save(path, &tensors)?;
    let sidecar = Sidecar {
        format_version: CHECKPOINT_VERSION,
        arch: model.arch.clone(),
        spec: model.spec.clone(),
        spec_hash: model.spec.version_hash.clone(),
        blob_sha256: file_sha256(path)?,
        metadata: model.metadata.clone(),
    };
    write_json_pretty(&sidecar_path(path), &sidecar)
}

/// Load a proxy checkpoint, verifying the blob hash, the spec binding, and
/// weight shapes. A sidecar whose spec hash does not match its own embedded
/// spec is rejected (tamper guard), as is a blob whose hash changed.
pub fn load_proxy(path: &Path) -> Result<ProxyModel> {
    let sidecar: Sidecar = read_json(&sidecar_path(path))?;
    if sidecar.format_version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {}",
            sidecar.format_version
        )));
    }
    let recomputed = sidecar.spec.compute_hash();
    if recomputed != sidecar.spec_hash || sidecar.spec.version_hash != sidecar.spec_hash {
        return Err(Error::SpecHashMismatch {
            expected: recomputed,
            got: sidecar.spec_hash.clone(),
        });
    }
    let blob_hash = file_sha256(path)?;
    if blob_hash != sidecar.blob_sha256 {
        return Err(Error::Data(format!(
            "weight blob hash mismatch for {} (corrupt file?)",
            path.display()
        )));
    }
    let tensors = blob::load(path)?;
    let reference = ProxyModel::new_seeded(sidecar.arch.clone(), sidecar.spec.clone(), 0)?;
    let mut weights = BTreeMap::new();
    for (name, refw) in &reference.weights {
        let loaded = tensors
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint missing weight {name}")))?;
        if loaded.shape() != refw.shape() {
            return Err(Error::Data(format!(
                "weight {name} has shape {:?}, expected {:?}",
                loaded.shape(),
                refw.shape()
            )));
        }
        weights.insert(name.clone(), Arc::new(loaded.clone()));
    }
    let model = ProxyModel {
        arch: sidecar.arch,
        spec: sidecar.spec,
        metadata: sidecar.metadata,
        weights,
    };
    model.check_finite()?;
    Ok(model)
}
