//! Feature extraction, Gram statistics, and the style/feature distances used
//! by both proxy training and graph optimization.
//!
//! Two extractor backends share one code path:
//! - `compact` — a seeded-random convolutional pyramid (self-contained
//!   default; what the acceptance suite runs on),
//! - `pretrained` — classifier weights loaded from a user-supplied blob with
//!   the architecture recorded in its sidecar (a VGG19-prefix preset is
//!   provided).
//!
//! Taps are the pre-pool activations at four scales. Distances are mean
//! absolute differences per tap, summed over taps; Gram matrices are
//! normalized by 1/(C·N). Both conventions are fixed here because they set
//! the scale of every reported loss.

use std::path::Path;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv::PadMode;
use crate::tensor::{Tape, Tensor};
use crate::util::rng::{domain, substream};
use crate::util::{blob, read_json, write_json_pretty};

/// Luma weights (Rec. 601) used by [`grayscale`].
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Smallest input side accepted by the extractor; four pooling stages below
/// this leave no spatial support for the last tap.
pub const MIN_INPUT: usize = 32;

/// Where extractor weights came from; recorded in every result report.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    SeededRandom { seed: u64 },
    Pretrained { path: String },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExtractorConfig {
    /// Channels per pyramid stage; one tap per stage.
    pub stage_channels: Vec<usize>,
    /// Convolutions per stage (same length as `stage_channels`).
    pub convs_per_stage: Vec<usize>,
    /// Per-channel input normalization.
    pub input_mean: [f64; 3],
    pub input_std: [f64; 3],
    pub provenance: Provenance,
}

impl ExtractorConfig {
    /// Self-contained default: compact random pyramid, wrap padding.
    pub fn compact(seed: u64) -> Self {
        ExtractorConfig {
            stage_channels: vec![16, 24, 32, 48],
            convs_per_stage: vec![1, 1, 1, 1],
            input_mean: [0.5, 0.5, 0.5],
            input_std: [0.5, 0.5, 0.5],
            provenance: Provenance::SeededRandom { seed },
        }
    }

    /// Architecture matching the first four stages of a VGG19 classifier;
    /// weights must be supplied through a blob file.
    pub fn vgg19_prefix(path: &str) -> Self {
        ExtractorConfig {
            stage_channels: vec![64, 128, 256, 512],
            convs_per_stage: vec![2, 2, 4, 4],
            input_mean: [0.485, 0.456, 0.406],
            input_std: [0.229, 0.224, 0.225],
            provenance: Provenance::Pretrained { path: path.into() },
        }
    }
}

/// Fixed-weight convolutional pyramid `F`. Immutable after construction and
/// safe to share across threads (weights are plain arrays).
pub struct FeatureExtractor {
    pub config: ExtractorConfig,
    /// (weight [Cout,Cin,3,3], bias [Cout]) per conv, stage-major.
    layers: Vec<(Arc<ArrayD<f64>>, Arc<ArrayD<f64>>)>,
}

impl FeatureExtractor {
    /// Build the configured backend: a user-supplied weight file when given
    /// (pretrained path), the seeded-random pyramid otherwise.
    pub fn build(seed: u64, weights: Option<&Path>) -> Result<Self> {
        match weights {
            Some(p) => Self::load(p),
            None => Ok(Self::seeded(seed)),
        }
    }

    /// Seeded-random backend (He-initialized weights, zero bias).
    pub fn seeded(seed: u64) -> Self {
        let config = ExtractorConfig::compact(seed);
        let mut layers = Vec::new();
        let mut cin = 3usize;
        let mut layer_idx = 0u64;
        for (stage, &cout) in config.stage_channels.iter().enumerate() {
            for _ in 0..config.convs_per_stage[stage] {
                let mut rng = substream(seed, domain::WEIGHT_INIT, &[layer_idx]);
                let std = (2.0 / (cin as f64 * 9.0)).sqrt();
                let n = cout * cin * 9;
                let data: Vec<f64> = (0..n)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let w = ArrayD::from_shape_vec(IxDyn(&[cout, cin, 3, 3]), data).unwrap();
                let b = ArrayD::zeros(IxDyn(&[cout]));
                layers.push((Arc::new(w), Arc::new(b)));
                cin = cout;
                layer_idx += 1;
            }
        }
        FeatureExtractor { config, layers }
    }

    /// Load a pretrained backend: `<path>` is the weight blob, `<path>.json`
    /// its sidecar config. Tensor names are `conv{i}.weight` / `conv{i}.bias`
    /// in stage-major order.
    pub fn load(path: &Path) -> Result<Self> {
        let config: ExtractorConfig =
            read_json(&path.with_extension("blob.json").with_file_name(format!(
                "{}.json",
                path.file_name().and_then(|s| s.to_str()).unwrap_or("weights")
            )))?;
        let tensors = blob::load(path)?;
        let mut layers = Vec::new();
        let mut cin = 3usize;
        let mut idx = 0usize;
        for (stage, &cout) in config.stage_channels.iter().enumerate() {
            for _ in 0..config.convs_per_stage[stage] {
                let w = tensors
                    .get(&format!("conv{idx}.weight"))
                    .ok_or_else(|| Error::Data(format!("missing conv{idx}.weight")))?;
                let b = tensors
                    .get(&format!("conv{idx}.bias"))
                    .ok_or_else(|| Error::Data(format!("missing conv{idx}.bias")))?;
                if w.shape() != [cout, cin, 3, 3] {
                    return Err(Error::Data(format!(
                        "conv{idx}.weight has shape {:?}, expected [{cout},{cin},3,3]",
                        w.shape()
                    )));
                }
                layers.push((Arc::new(w.clone()), Arc::new(b.clone())));
                cin = cout;
                idx += 1;
            }
        }
        Ok(FeatureExtractor { config, layers })
    }

    /// Persist weights + sidecar (useful for converting external weights).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = blob::TensorMap::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            tensors.insert(format!("conv{i}.weight"), w.as_ref().clone());
            tensors.insert(format!("conv{i}.bias"), b.as_ref().clone());
        }
        blob::save(path, &tensors)?;
        let sidecar = path.with_file_name(format!(
            "{}.json",
            path.file_name().and_then(|s| s.to_str()).unwrap_or("weights")
        ));
        write_json_pretty(&sidecar, &self.config)
    }

    /// Deep feature maps at the four taps. Accepts [3,H,W] or [1,H,W]
    /// (grayscale inputs are replicated to three channels).
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let shape = x.shape().to_vec();
        if shape.len() != 3 || (shape[0] != 1 && shape[0] != 3) {
            return Err(Error::DimensionMismatch {
                expected: 3,
                got: shape.first().copied().unwrap_or(0),
                context: "extractor input channels".into(),
            });
        }
        let (h, w) = (shape[1], shape[2]);
        if h < MIN_INPUT || w < MIN_INPUT {
            return Err(Error::Data(format!(
                "extractor input {h}x{w} below the smallest tap ({MIN_INPUT}px)"
            )));
        }
        let tape = x.tape().clone();
        let rgb = if shape[0] == 1 {
            Tensor::concat_c(&[x, x, x])
        } else {
            x.clone()
        };
        // (x - mean) / std, per channel
        let inv_std: Vec<f64> = self.config.input_std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = self
            .config
            .input_mean
            .iter()
            .zip(&inv_std)
            .map(|(m, i)| -m * i)
            .collect();
        let inv = tape.constant(ArrayD::from_shape_vec(IxDyn(&[3]), inv_std).unwrap());
        let mut cur = rgb.mul_axis(&inv, 0);
        let shift_field = tape.constant({
            let mut a = ArrayD::zeros(IxDyn(&[3, h, w]));
            for (c, &s) in shift.iter().enumerate() {
                a.index_axis_mut(ndarray::Axis(0), c).fill(s);
            }
            a
        });
        cur = cur.add(&shift_field);

        let mut taps = Vec::with_capacity(self.config.stage_channels.len());
        let mut li = 0usize;
        let n_stages = self.config.stage_channels.len();
        for stage in 0..n_stages {
            for _ in 0..self.config.convs_per_stage[stage] {
                let (w, b) = &self.layers[li];
                let wt = tape.constant_shared(Arc::clone(w));
                let bt = tape.constant_shared(Arc::clone(b));
                cur = cur.conv2d(&wt, Some(&bt), 1, PadMode::Circular).relu();
                li += 1;
            }
            taps.push(cur.clone());
            if stage + 1 < n_stages {
                cur = cur.avg_pool2(2);
            }
        }
        Ok(taps)
    }

    /// Gram matrices of the taps.
    pub fn grams(&self, feats: &[Tensor]) -> Vec<Tensor> {
        feats.iter().map(gram).collect()
    }

    /// `Σ_taps mean|F(a) - F(b)|`.
    pub fn feature_distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        Ok(l1_sum(&fa, &fb))
    }

    /// `Σ_taps mean|GM(F(a)) - GM(F(b))|`.
    pub fn style_distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ga = self.grams(&self.features(a)?);
        let gb = self.grams(&self.features(b)?);
        Ok(l1_sum(&ga, &gb))
    }

    /// Evaluate `f` at the resolution ladder (full, 1/2, 1/4 — the analogue
    /// of 256/128/64 at full scale) and sum. Rungs whose side would drop
    /// below the extractor minimum are skipped.
    pub fn multires(
        &self,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(&Self, &Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let (h, w) = (a.shape()[1], a.shape()[2]);
        let mut total: Option<Tensor> = None;
        for factor in multires_factors((h, w)) {
            let (ar, br) = if factor == 1 {
                (a.clone(), b.clone())
            } else {
                (a.avg_pool2(factor), b.avg_pool2(factor))
            };
            let term = f(self, &ar, &br)?;
            total = Some(match total {
                Some(t) => t.add(&term),
                None => term,
            });
        }
        total.ok_or_else(|| {
            Error::Data(format!(
                "image {h}x{w} too small for any multi-resolution rung"
            ))
        })
    }
}

/// Downsampling factors of the multi-resolution ladder at a resolution.
pub fn multires_factors(resolution: (usize, usize)) -> Vec<usize> {
    let side = resolution.0.min(resolution.1);
    [1usize, 2, 4]
        .into_iter()
        .filter(|f| side / f >= MIN_INPUT)
        .collect()
}

/// Gram matrix `F·Fᵀ/(C·N)` of a [C,H,W] feature map: symmetric PSD,
/// invariant to spatial permutations.
pub fn gram(f: &Tensor) -> Tensor {
    let shape = f.shape();
    assert_eq!(shape.len(), 3, "gram expects [C,H,W]");
    let (c, n) = (shape[0], shape[1] * shape[2]);
    let flat = f.reshape(&[c, n]);
    flat.matmul_nt(&flat).mul_c(1.0 / (c * n) as f64)
}

/// `Σ_i mean|a_i - b_i|` over paired tensor lists.
pub fn l1_sum(a: &[Tensor], b: &[Tensor]) -> Tensor {
    assert_eq!(a.len(), b.len());
    let mut total: Option<Tensor> = None;
    for (x, y) in a.iter().zip(b) {
        let term = x.l1_distance(y);
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    total.expect("at least one tap")
}

/// Rec. 601 luma of an RGB image: [3,H,W] -> [1,H,W].
pub fn grayscale(x: &Tensor) -> Tensor {
    assert_eq!(x.shape()[0], 3, "grayscale expects [3,H,W]");
    let r = x.slice_c(0, 1).mul_c(LUMA[0]);
    let g = x.slice_c(1, 1).mul_c(LUMA[1]);
    let b = x.slice_c(2, 1).mul_c(LUMA[2]);
    r.add(&g).add(&b)
}

/// Replicate a single-channel image to RGB.
pub fn to_rgb(x: &Tensor) -> Tensor {
    assert_eq!(x.shape()[0], 1, "to_rgb expects [1,H,W]");
    Tensor::concat_c(&[x, x, x])
}

/// Feature + Gram values of a fixed image, precomputed once so repeated
/// distance evaluations against it can inject them as constants.
pub struct FeatureTargets {
    pub feats: Vec<Arc<ArrayD<f64>>>,
    pub grams: Vec<Arc<ArrayD<f64>>>,
}

impl FeatureExtractor {
    pub fn precompute_targets(&self, img: &ArrayD<f64>) -> Result<FeatureTargets> {
        let tape = Tape::new();
        let x = tape.constant(img.clone());
        let feats = self.features(&x)?;
        let grams = self.grams(&feats);
        Ok(FeatureTargets {
            feats: feats.iter().map(|t| t.value()).collect(),
            grams: grams.iter().map(|t| t.value()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng::{splitmix64, unit_f64};
    use ndarray::IxDyn;

    fn rng_img(c: usize, h: usize, w: usize, seed: u64) -> ArrayD<f64> {
        let n = c * h * w;
        let data: Vec<f64> = (0..n)
            .map(|i| unit_f64(splitmix64(seed ^ (i as u64).wrapping_mul(0x517c))))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&[c, h, w]), data).unwrap()
    }

    #[test]
    fn extractor_is_deterministic_across_constructions() {
        let a = FeatureExtractor::seeded(9);
        let b = FeatureExtractor::seeded(9);
        let img = rng_img(3, 32, 32, 4);
        let ta = Tape::new();
        let fa = a.features(&ta.constant(img.clone())).unwrap();
        let tb = Tape::new();
        let fb = b.features(&tb.constant(img)).unwrap();
        for (x, y) in fa.iter().zip(&fb) {
            for (p, q) in x.value().iter().zip(y.value().iter()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn features_shift_equivariant_for_wrap_padding() {
        let ex = FeatureExtractor::seeded(3);
        let img = rng_img(3, 32, 32, 8);
        // shift by 8 pixels: tap k (stride 2^k) shifts by 8 / 2^k, exactly
        let mut shifted = img.clone();
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    shifted[[c, y, x]] = img[[c, y, (x + 32 - 8) % 32]];
                }
            }
        }
        let t1 = Tape::new();
        let f1 = ex.features(&t1.constant(img)).unwrap();
        let t2 = Tape::new();
        let f2 = ex.features(&t2.constant(shifted)).unwrap();
        for (k, (a, b)) in f1.iter().zip(&f2).enumerate() {
            let s = 8usize >> k;
            let av = a.value();
            let bv = b.value();
            let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let expect = av[[ci, y, (x + w - s) % w]];
                        assert_eq!(bv[[ci, y, x]].to_bits(), expect.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn features_reject_small_inputs() {
        let ex = FeatureExtractor::seeded(0);
        let tape = Tape::new();
        let x = tape.constant(rng_img(3, 16, 16, 0));
        assert!(ex.features(&x).is_err());
    }

    #[test]
    fn gram_of_constant_channels_is_scaled_outer_product() {
        let tape = Tape::new();
        let c = [0.3f64, -0.7, 1.1];
        let mut arr = ArrayD::zeros(IxDyn(&[3, 4, 5]));
        for (i, &v) in c.iter().enumerate() {
            arr.index_axis_mut(ndarray::Axis(0), i).fill(v);
        }
        let g = gram(&tape.constant(arr));
        let gv = g.value();
        for i in 0..3 {
            for j in 0..3 {
                let expect = c[i] * c[j] / 3.0; // rank-1, 1/(C·N) with N factors cancelling
                assert!((gv[[i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gram_orthogonal_supports_have_zero_off_diagonals() {
        let tape = Tape::new();
        let mut arr = ArrayD::zeros(IxDyn(&[2, 2, 4]));
        // channel 0 lives on the left half, channel 1 on the right half
        for y in 0..2 {
            for x in 0..2 {
                arr[[0, y, x]] = 1.0 + y as f64;
                arr[[1, y, x + 2]] = 2.0 - x as f64;
            }
        }
        let g = gram(&tape.constant(arr.clone()));
        let gv = g.value();
        assert_eq!(gv[[0, 1]], 0.0);
        assert_eq!(gv[[1, 0]], 0.0);
        // direct summation oracle for the diagonal
        let mut d0 = 0.0;
        for v in arr.index_axis(ndarray::Axis(0), 0).iter() {
            d0 += v * v;
        }
        assert!((gv[[0, 0]] - d0 / (2.0 * 8.0)).abs() < 1e-14);
    }

    #[test]
    fn gram_is_permutation_invariant_and_psd() {
        let arr = rng_img(4, 6, 6, 21);
        let tape = Tape::new();
        let g = gram(&tape.constant(arr.clone()));
        // spatial permutation: reverse raster order
        let flat: Vec<f64> = arr.iter().cloned().collect();
        let mut per = arr.clone();
        for c in 0..4 {
            for i in 0..36 {
                let src = 35 - i;
                per[[c, i / 6, i % 6]] = flat[c * 36 + src];
            }
        }
        let gp = gram(&tape.constant(per));
        for (a, b) in g.value().iter().zip(gp.value().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // PSD check: xᵀGx >= -1e-8 for random probes
        let gv = g.value();
        for probe in 0..100u64 {
            let x: Vec<f64> = (0..4)
                .map(|i| unit_f64(splitmix64(probe * 7 + i)) - 0.5)
                .collect();
            let mut q = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    q += x[i] * gv[[i, j]] * x[j];
                }
            }
            assert!(q >= -1e-8, "gram not PSD: {q}");
        }
    }

    #[test]
    fn distances_vanish_on_identical_inputs_and_stay_positive() {
        let ex = FeatureExtractor::seeded(1);
        let a = rng_img(3, 32, 32, 31);
        let tape = Tape::new();
        let at = tape.constant(a.clone());
        let bt = tape.constant(a.clone());
        assert_eq!(ex.feature_distance(&at, &bt).unwrap().scalar_value(), 0.0);
        assert_eq!(ex.style_distance(&at, &bt).unwrap().scalar_value(), 0.0);
        for s in 0..100u64 {
            let b = rng_img(3, 32, 32, 1000 + s);
            let t = Tape::new();
            let d = ex
                .feature_distance(&t.constant(a.clone()), &t.constant(b))
                .unwrap()
                .scalar_value();
            assert!(d > 0.0);
        }
    }

    #[test]
    fn feature_distance_satisfies_triangle_inequality() {
        let ex = FeatureExtractor::seeded(5);
        for s in 0..10u64 {
            let a = rng_img(3, 32, 32, 3 * s);
            let b = rng_img(3, 32, 32, 3 * s + 1);
            let c = rng_img(3, 32, 32, 3 * s + 2);
            let t = Tape::new();
            let (at, bt, ct) = (
                t.constant(a),
                t.constant(b),
                t.constant(c),
            );
            let ab = ex.feature_distance(&at, &bt).unwrap().scalar_value();
            let bc = ex.feature_distance(&bt, &ct).unwrap().scalar_value();
            let ac = ex.feature_distance(&at, &ct).unwrap().scalar_value();
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn style_distance_orders_permuted_vs_structured_pairs() {
        let ex = FeatureExtractor::seeded(2);
        let a = rng_img(3, 32, 32, 77);
        // permuted pixels: same marginal statistics
        let mut perm = a.clone();
        for c in 0..3 {
            for i in 0..(32 * 32) {
                let j = (splitmix64(i as u64 ^ 0xbeef) % 1024) as usize;
                let (yi, xi) = (i / 32, i % 32);
                let (yj, xj) = (j / 32, j % 32);
                let tmp = perm[[c, yi, xi]];
                perm[[c, yi, xi]] = perm[[c, yj, xj]];
                perm[[c, yj, xj]] = tmp;
            }
        }
        // structured difference: hard half-and-half split
        let mut structured = ArrayD::zeros(IxDyn(&[3, 32, 32]));
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    structured[[c, y, x]] = if x < 16 { 0.0 } else { 1.0 };
                }
            }
        }
        let t = Tape::new();
        let at = t.constant(a);
        let d_perm = ex
            .style_distance(&at, &t.constant(perm))
            .unwrap()
            .scalar_value();
        let d_struct = ex
            .style_distance(&at, &t.constant(structured))
            .unwrap()
            .scalar_value();
        assert!(
            d_perm < d_struct,
            "permuted {d_perm} should score below structured {d_struct}"
        );
    }

    #[test]
    fn multires_sums_single_resolution_calls() {
        let ex = FeatureExtractor::seeded(4);
        let a = rng_img(3, 128, 128, 51);
        let b = rng_img(3, 128, 128, 52);
        let t = Tape::new();
        let (at, bt) = (t.constant(a.clone()), t.constant(b.clone()));
        let total = ex
            .multires(&at, &bt, |e, x, y| e.feature_distance(x, y))
            .unwrap()
            .scalar_value();
        let mut expect = 0.0;
        for f in [1usize, 2, 4] {
            let (ar, br) = if f == 1 {
                (at.clone(), bt.clone())
            } else {
                (at.avg_pool2(f), bt.avg_pool2(f))
            };
            expect += ex.feature_distance(&ar, &br).unwrap().scalar_value();
        }
        assert_eq!(total, expect);
        // the full-scale ladder is 256/128/64
        assert_eq!(multires_factors((256, 256)), vec![1, 2, 4]);
        // identical inputs vanish at every rung
        let z = ex
            .multires(&at, &at.clone(), |e, x, y| e.style_distance(x, y))
            .unwrap()
            .scalar_value();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn grayscale_follows_luma_weights() {
        let tape = Tape::new();
        // gray input: r = g = b -> identity
        let mut gray_in = ArrayD::zeros(IxDyn(&[3, 4, 4]));
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    gray_in[[c, y, x]] = (y * 4 + x) as f64 / 15.0;
                }
            }
        }
        let g = grayscale(&tape.constant(gray_in.clone()));
        for y in 0..4 {
            for x in 0..4 {
                let expect = gray_in[[0, y, x]];
                assert!((g.value()[[0, y, x]] - expect).abs() < 1e-12);
            }
        }
        // pure red vs pure green differ per the luma weights
        let mut red = ArrayD::zeros(IxDyn(&[3, 2, 2]));
        red.index_axis_mut(ndarray::Axis(0), 0).fill(1.0);
        let mut green = ArrayD::zeros(IxDyn(&[3, 2, 2]));
        green.index_axis_mut(ndarray::Axis(0), 1).fill(1.0);
        let gr = grayscale(&tape.constant(red)).value()[[0, 0, 0]];
        let gg = grayscale(&tape.constant(green)).value()[[0, 0, 0]];
        assert!((gr - LUMA[0]).abs() < 1e-15);
        assert!((gg - LUMA[1]).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&gr) && (0.0..=1.0).contains(&gg));
    }

    #[test]
    fn feature_gradcheck_matches_finite_differences() {
        let ex = FeatureExtractor::seeded(6);
        let img = rng_img(3, 32, 32, 61);
        let target = rng_img(3, 32, 32, 62);
        let loss_at = |arr: &ArrayD<f64>| -> f64 {
            let t = Tape::new();
            let x = t.var(arr.clone());
            ex.feature_distance(&x, &t.constant(target.clone()))
                .unwrap()
                .scalar_value()
        };
        let t = Tape::new();
        let x = t.var(img.clone());
        let loss = ex.feature_distance(&x, &t.constant(target.clone())).unwrap();
        let grads = t.backward(&loss);
        let g = grads.wrt_or_zeros(&x);
        let h = 1e-5;
        for probe in 0..20u64 {
            let i = (splitmix64(probe) % (3 * 32 * 32)) as usize;
            let mut plus = img.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            let mut minus = img.clone();
            minus.as_slice_mut().unwrap()[i] -= h;
            let num = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let ana = g.as_slice().unwrap()[i];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
            assert!(rel <= 1e-3, "coord {i}: {ana} vs {num} (rel {rel:.2e})");
        }
    }
}
