//! Proxy training: the combined L1 + feature + style loss with an optional
//! adversarial critic, Adam updates, deterministic batching, atomic
//! checkpoints, and held-out evaluation.
//!
//! Determinism contract: batches are derived statelessly from (seed, epoch),
//! per-sample passes run on independent tapes (possibly in parallel), and
//! gradients are reduced in batch-index order — identical (dataset, config,
//! seed) reproads identical weights bit for bit, and a resumed run continues
//! the exact trajectory of an uninterrupted one.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paramspace::{dataset_images, load_manifest, verify_manifest, DatasetManifest};
use crate::perceptual::FeatureExtractor;
use crate::proxynet::{
    load_proxy, save_proxy, FidelityReport, ProxyArch, ProxyMetadata, ProxyModel,
};
use crate::tensor::conv::PadMode;
use crate::tensor::{Tape, Tensor};
use crate::util::adam::{Adam, AdamParams};
use crate::util::rng::{domain, substream};
use crate::util::{blob, read_json, write_json_pretty};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Hard cap on optimization steps (overrides epochs when smaller).
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Adversarial weight; zero disables the critic entirely.
    pub lambda3: f64,
    pub r1_gamma: f64,
    pub critic_lr: f64,
    pub checkpoint_every: usize,
    /// Indices reserved for monitoring (never trained on). None picks an
    /// evenly spread set of up to 32 records; Some(vec![]) disables
    /// monitoring and best-model selection falls back to the last step.
    pub fixed_eval_set: Option<Vec<usize>>,
    pub seed: u64,
    pub extractor_seed: u64,
    /// Optional pretrained extractor weight file; the seeded-random backend
    /// is used when absent.
    pub extractor_weights: Option<String>,
    /// Architecture override; the default is the desk-scale architecture at
    /// the dataset resolution.
    pub arch: Option<ProxyArch>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            max_steps: None,
            batch_size: 32,
            lr: 0.0025,
            adam_betas: (0.9, 0.999),
            lambda0: 1.0,
            lambda1: 10.0,
            lambda2: 1.0,
            lambda3: 0.0,
            r1_gamma: 10.0,
            critic_lr: 1e-3,
            checkpoint_every: 250,
            fixed_eval_set: None,
            seed: 0,
            extractor_seed: 0x5eed,
            extractor_weights: None,
            arch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("r1_gamma", self.r1_gamma),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.lr <= 0.0 || self.critic_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step loss terms as logged to `train_log.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub l1: f64,
    pub feat: f64,
    pub style: f64,
    pub adv: f64,
    pub lr: f64,
}

// ---------------------------------------------------------------------------
// Critic
// ---------------------------------------------------------------------------

/// Adversarial critic scoring (θ, image) pairs. The parameter vector enters
/// as constant channels concatenated to the image; the image path is a
/// strided convolution stack ending in a linear logit.
pub struct Critic {
    pub param_dim: usize,
    pub resolution: usize,
    channels: Vec<usize>,
    weights: BTreeMap<String, Arc<ArrayD<f64>>>,
}

impl Critic {
    pub fn new_seeded(param_dim: usize, resolution: usize, seed: u64) -> Self {
        let levels = (resolution / 4).trailing_zeros() as usize;
        let channels: Vec<usize> = (0..levels).map(|l| (32 + 16 * l).min(96)).collect();
        let mut weights = BTreeMap::new();
        let mut cin = 1 + param_dim;
        for (l, &cout) in channels.iter().enumerate() {
            let mut rng = substream(seed, domain::WEIGHT_INIT, &[0xc417 + l as u64]);
            let std = (2.0 / (cin as f64 * 9.0)).sqrt();
            let data: Vec<f64> = (0..cout * cin * 9)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            weights.insert(
                format!("critic.layer{l}.weight"),
                Arc::new(ArrayD::from_shape_vec(IxDyn(&[cout, cin, 3, 3]), data).unwrap()),
            );
            weights.insert(
                format!("critic.layer{l}.bias"),
                Arc::new(ArrayD::zeros(IxDyn(&[cout]))),
            );
            cin = cout;
        }
        let flat = cin * 16; // final 4x4 map
        let mut rng = substream(seed, domain::WEIGHT_INIT, &[0xc417_ff]);
        let std = 1.0 / (flat as f64).sqrt();
        let data: Vec<f64> = (0..flat)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        weights.insert(
            "critic.head.weight".into(),
            Arc::new(ArrayD::from_shape_vec(IxDyn(&[1, flat]), data).unwrap()),
        );
        weights.insert("critic.head.bias".into(), Arc::new(ArrayD::zeros(IxDyn(&[1]))));
        Critic {
            param_dim,
            resolution,
            channels,
            weights,
        }
    }

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

    /// Realness score of a (u, image) pair; image is [1,H,W].
    pub fn score_bound(
        &self,
        u: &[f64],
        image: &Tensor,
        bound: &BTreeMap<String, Tensor>,
    ) -> Tensor {
        let tape = image.tape().clone();
        let (h, w) = (image.shape()[1], image.shape()[2]);
        // broadcast parameters as constant channels
        let mut uc: ArrayD<f64> = ArrayD::zeros(IxDyn(&[self.param_dim, h, w]));
        for (c, &val) in u.iter().enumerate() {
            uc.index_axis_mut(ndarray::Axis(0), c).fill(val);
        }
        let mut x = Tensor::concat_c(&[image, &tape.constant(uc)]);
        for l in 0..self.channels.len() {
            x = x
                .conv2d(
                    &bound[&format!("critic.layer{l}.weight")],
                    Some(&bound[&format!("critic.layer{l}.bias")]),
                    2,
                    PadMode::Circular,
                )
                .leaky_relu(0.2);
        }
        let flat = x.numel();
        x.reshape(&[flat])
            .linear(&bound["critic.head.weight"], &bound["critic.head.bias"])
    }

    fn set_weight(&mut self, name: &str, value: ArrayD<f64>) {
        self.weights.insert(name.to_string(), Arc::new(value));
    }
}

/// R1 gradient penalty of a critic at a real pair: γ/2 ‖∇_image score‖².
/// Returns the penalty and the image gradient (reused by the weight-gradient
/// estimate).
pub fn r1_penalty(critic: &Critic, u: &[f64], image: &Array2<f64>, gamma: f64) -> (f64, ArrayD<f64>) {
    let tape = Tape::new();
    let (h, w) = image.dim();
    let img = tape.var(
        image
            .clone()
            .into_dyn()
            .into_shape_with_order(IxDyn(&[1, h, w]))
            .unwrap(),
    );
    let bound = critic.bind_weights(&tape, false);
    let score = critic.score_bound(u, &img, &bound);
    let grads = tape.backward(&score);
    let g = grads.wrt_or_zeros(&img);
    let penalty = 0.5 * gamma * g.iter().map(|v| v * v).sum::<f64>();
    (penalty, g)
}

// ---------------------------------------------------------------------------
// Loss assembly
// ---------------------------------------------------------------------------

pub struct LossTerms {
    pub l1: f64,
    pub feat: f64,
    pub style: f64,
    pub adv: f64,
}

/// Combined training objective on one (pred, target) pair:
/// λ0·L1 + λ1·L_feat + λ2·L_style (+ λ3·L_adv when a critic is given).
/// Zero when pred equals target and the adversarial term is disabled.
pub fn proxy_loss(
    pred: &Tensor,
    target: &Tensor,
    cfg: &TrainConfig,
    extractor: &FeatureExtractor,
    critic: Option<(&Critic, &[f64], &BTreeMap<String, Tensor>)>,
) -> Result<(Tensor, LossTerms)> {
    if pred.shape() != target.shape() {
        return Err(Error::DimensionMismatch {
            expected: target.numel(),
            got: pred.numel(),
            context: "proxy loss resolution".into(),
        });
    }
    let l1 = pred.l1_distance(target);
    let feat = extractor.feature_distance(pred, target)?;
    let style = extractor.style_distance(pred, target)?;
    let mut total = l1
        .mul_c(cfg.lambda0)
        .add(&feat.mul_c(cfg.lambda1))
        .add(&style.mul_c(cfg.lambda2));
    let mut adv_v = 0.0;
    if let Some((critic, u, bound)) = critic {
        if cfg.lambda3 > 0.0 {
            let fake_score = critic.score_bound(u, pred, bound);
            let adv = fake_score.neg().softplus();
            adv_v = adv.scalar_value();
            total = total.add(&adv.mul_c(cfg.lambda3));
        }
    }
    let terms = LossTerms {
        l1: l1.scalar_value(),
        feat: feat.scalar_value(),
        style: style.scalar_value(),
        adv: adv_v,
    };
    Ok((total, terms))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct NamedAdam {
    names: Vec<String>,
    adam: Adam,
}

impl NamedAdam {
    fn new(names: Vec<String>, shapes: Vec<Vec<usize>>, betas: (f64, f64)) -> Self {
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        NamedAdam {
            names,
            adam: Adam::new(
                AdamParams {
                    betas,
                    eps: 1e-8,
                },
                &shape_refs,
            ),
        }
    }

    fn to_blob(&self, prefix: &str, out: &mut blob::TensorMap) {
        for (i, name) in self.names.iter().enumerate() {
            out.insert(format!("{prefix}.m.{name}"), self.adam.m[i].clone());
            out.insert(format!("{prefix}.v.{name}"), self.adam.v[i].clone());
        }
        out.insert(
            format!("{prefix}.t"),
            ArrayD::from_elem(IxDyn(&[1]), self.adam.t as f64),
        );
    }

    fn restore(&mut self, prefix: &str, tensors: &blob::TensorMap) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            self.adam.m[i] = tensors
                .get(&format!("{prefix}.m.{name}"))
                .ok_or_else(|| Error::Data(format!("state missing {prefix}.m.{name}")))?
                .clone();
            self.adam.v[i] = tensors
                .get(&format!("{prefix}.v.{name}"))
                .ok_or_else(|| Error::Data(format!("state missing {prefix}.v.{name}")))?
                .clone();
        }
        self.adam.t = tensors
            .get(&format!("{prefix}.t"))
            .ok_or_else(|| Error::Data(format!("state missing {prefix}.t")))?[[0]]
            as u64;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    step: usize,
    /// None until the first monitored evaluation.
    best_l1: Option<f64>,
    best_step: usize,
    done: bool,
}

/// Deterministic training-set order for one epoch.
fn epoch_order(train_indices: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train_indices.to_vec();
    let mut rng = substream(seed, domain::EPOCH, &[epoch as u64]);
    order.shuffle(&mut rng);
    order
}

fn default_eval_set(n: usize) -> Vec<usize> {
    let count = 32.min(n / 4).max(1);
    let stride = (n / count).max(1);
    (0..count).map(|i| i * stride).collect()
}

/// Train a proxy on a dataset directory. Returns the best checkpoint by
/// fixed-eval L1 (or the final model when monitoring is disabled); artifacts
/// (checkpoints, state, `train_log.jsonl`, `best.proxy`) land in `out_dir`.
/// A partially trained `out_dir` resumes from its last checkpoint with the
/// identical trajectory.
pub fn train_proxy(
    dataset_dir: &Path,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<ProxyModel> {
    cfg.validate()?;
    let manifest = load_manifest(dataset_dir)?;
    verify_manifest(dataset_dir, &manifest, false)?;
    let spec = crate::generators::generator_spec(&manifest.generator)?.clone();
    let n = manifest.records.len();
    let (res_h, res_w) = manifest.resolution();
    if res_h != res_w {
        return Err(Error::Config("training expects square images".into()));
    }

    let eval_set: Vec<usize> = match &cfg.fixed_eval_set {
        Some(v) => v.clone(),
        None => default_eval_set(n),
    };
    for &i in &eval_set {
        if i >= n {
            return Err(Error::Config(format!("fixed_eval index {i} out of range")));
        }
    }
    let eval_lookup: BTreeSet<usize> = eval_set.iter().cloned().collect();
    let train_indices: Vec<usize> = (0..n).filter(|i| !eval_lookup.contains(i)).collect();
    if train_indices.is_empty() {
        return Err(Error::Config("no training records left".into()));
    }

    let images = dataset_images(dataset_dir, &manifest)?;
    let extractor = FeatureExtractor::build(
        cfg.extractor_seed,
        cfg.extractor_weights.as_deref().map(Path::new),
    )?;

    let arch = cfg
        .arch
        .clone()
        .unwrap_or_else(|| ProxyArch::desk_default(spec.entry_count(), res_h));
    if arch.param_dim != spec.entry_count() || arch.output_resolution != (res_h, res_w) {
        return Err(Error::Config(
            "architecture does not match dataset spec/resolution".into(),
        ));
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let steps_per_epoch = train_indices.len().div_ceil(cfg.batch_size);
    let total_steps = cfg
        .max_steps
        .unwrap_or(usize::MAX)
        .min(cfg.epochs * steps_per_epoch);

    // fresh or resumed state
    let state_json = out_dir.join("state_latest.json");
    let state_blob = out_dir.join("state_latest.blob");
    let model;
    let mut critic = if cfg.lambda3 > 0.0 {
        Some(Critic::new_seeded(spec.entry_count(), res_h, cfg.seed ^ 0xc417))
    } else {
        None
    };
    let gen_names = {
        let probe = ProxyModel::new_seeded(arch.clone(), spec.clone(), cfg.seed)?;
        probe.weight_names()
    };
    let gen_shapes: Vec<Vec<usize>>;
    let mut start_step = 0usize;
    let mut best_l1 = f64::INFINITY;
    let mut best_step = 0usize;

    if state_json.exists() {
        let st: TrainerState = read_json(&state_json)?;
        if st.step >= total_steps {
            return load_proxy(&out_dir.join("best.proxy"));
        }
        model = load_proxy(&out_dir.join("ckpt_latest.proxy"))?;
        start_step = st.step;
        best_l1 = st.best_l1.unwrap_or(f64::INFINITY);
        best_step = st.best_step;
        gen_shapes = gen_names
            .iter()
            .map(|k| model.weight(k).unwrap().shape().to_vec())
            .collect();
        let tensors = blob::load(&state_blob)?;
        if let Some(c) = critic.as_mut() {
            for name in c.weights.keys().cloned().collect::<Vec<_>>() {
                if let Some(w) = tensors.get(&format!("w.{name}")) {
                    c.set_weight(&name, w.clone());
                }
            }
        }
        let mut adam_g = NamedAdam::new(gen_names.clone(), gen_shapes.clone(), cfg.adam_betas);
        adam_g.restore("adam_g", &tensors)?;
        return train_loop(
            model, critic, adam_g, Some(tensors), cfg, &manifest, &images, &extractor,
            &train_indices, &eval_set, start_step, total_steps, best_l1, best_step, out_dir,
        );
    }

    model = ProxyModel::new_seeded(arch, spec, cfg.seed)?;
    gen_shapes = gen_names
        .iter()
        .map(|k| model.weight(k).unwrap().shape().to_vec())
        .collect();
    let adam_g = NamedAdam::new(gen_names, gen_shapes, cfg.adam_betas);
    train_loop(
        model, critic, adam_g, None, cfg, &manifest, &images, &extractor, &train_indices,
        &eval_set, start_step, total_steps, best_l1, best_step, out_dir,
    )
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    mut model: ProxyModel,
    mut critic: Option<Critic>,
    mut adam_g: NamedAdam,
    resume_tensors: Option<blob::TensorMap>,
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    images: &[Array2<f64>],
    extractor: &FeatureExtractor,
    train_indices: &[usize],
    eval_set: &[usize],
    start_step: usize,
    total_steps: usize,
    mut best_l1: f64,
    mut best_step: usize,
    out_dir: &Path,
) -> Result<ProxyModel> {
    let steps_per_epoch = train_indices.len().div_ceil(cfg.batch_size);
    let (h, w) = manifest.resolution();

    let mut adam_c = critic.as_ref().map(|c| {
        let names: Vec<String> = c.weights.keys().cloned().collect();
        let shapes: Vec<Vec<usize>> = names
            .iter()
            .map(|k| c.weights[k].shape().to_vec())
            .collect();
        let mut a = NamedAdam::new(names, shapes, cfg.adam_betas);
        if let Some(t) = &resume_tensors {
            // ignore missing state for a fresh critic
            let _ = a.restore("adam_c", t);
        }
        a
    });

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;

    for step in start_step..total_steps {
        let epoch = step / steps_per_epoch;
        let within = step % steps_per_epoch;
        let order = epoch_order(train_indices, cfg.seed, epoch);
        let lo = within * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(order.len());
        let batch: Vec<usize> = order[lo..hi].to_vec();

        // generator pass: per-sample tapes in parallel, ordered reduction
        struct SampleOut {
            grads: Vec<ArrayD<f64>>,
            terms: LossTerms,
            pred: ArrayD<f64>,
        }
        let results: Vec<Result<SampleOut>> = batch
            .par_iter()
            .map(|&idx| {
                let tape = Tape::new();
                let u = &manifest.records[idx].normalized_params;
                let ut = tape.constant(
                    ArrayD::from_shape_vec(IxDyn(&[u.len()]), u.clone()).unwrap(),
                );
                let bound = model.bind_weights(&tape, true);
                let pred = model.forward_bound(&ut, &bound)?;
                let target = tape.constant(
                    images[idx]
                        .clone()
                        .into_dyn()
                        .into_shape_with_order(IxDyn(&[1, h, w]))
                        .unwrap(),
                );
                let critic_bound = critic
                    .as_ref()
                    .map(|c| (c, c.bind_weights(&tape, false)));
                let critic_arg = critic_bound
                    .as_ref()
                    .map(|(c, b)| (*c, u.as_slice(), b));
                let (loss, terms) = proxy_loss(&pred, &target, cfg, extractor, critic_arg)?;
                if !loss.scalar_value().is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at step {step} record {idx}"
                    )));
                }
                let grads = tape.backward(&loss);
                let named: Vec<ArrayD<f64>> = adam_g
                    .names
                    .iter()
                    .map(|name| grads.wrt_or_zeros(&bound[name]))
                    .collect();
                Ok(SampleOut {
                    grads: named,
                    terms,
                    pred: pred.value().as_ref().clone(),
                })
            })
            .collect();

        let mut mean_grads: Vec<ArrayD<f64>> = adam_g
            .names
            .iter()
            .map(|name| ArrayD::zeros(model.weight(name).unwrap().raw_dim()))
            .collect();
        let mut terms_sum = (0.0, 0.0, 0.0, 0.0);
        let mut preds = Vec::with_capacity(batch.len());
        let bsz = batch.len() as f64;
        for r in results {
            let s = match r {
                Ok(s) => s,
                Err(e) => {
                    let snap = out_dir.join("nan_snapshot.proxy");
                    let _ = save_proxy(&model, &snap);
                    return Err(Error::Numeric(format!(
                        "{e}; diagnostic snapshot at {}",
                        snap.display()
                    )));
                }
            };
            for (acc, g) in mean_grads.iter_mut().zip(&s.grads) {
                *acc += g;
            }
            terms_sum.0 += s.terms.l1;
            terms_sum.1 += s.terms.feat;
            terms_sum.2 += s.terms.style;
            terms_sum.3 += s.terms.adv;
            preds.push(s.pred);
        }
        for g in &mut mean_grads {
            g.mapv_inplace(|v| v / bsz);
        }

        let mut params: Vec<ArrayD<f64>> = adam_g
            .names
            .iter()
            .map(|name| model.weight(name).unwrap().as_ref().clone())
            .collect();
        adam_g.adam.step(&mut params, &mean_grads, cfg.lr);
        for (name, p) in adam_g.names.iter().zip(params) {
            model.set_weight(name, p)?;
        }

        // critic pass (1:1 with generator updates)
        if let (Some(c), Some(ac)) = (critic.as_mut(), adam_c.as_mut()) {
            step_critic(c, ac, cfg, manifest, images, &batch, &preds)?;
        }

        let record = TrainLogRecord {
            step,
            l1: terms_sum.0 / bsz,
            feat: terms_sum.1 / bsz,
            style: terms_sum.2 / bsz,
            adv: terms_sum.3 / bsz,
            lr: cfg.lr,
        };
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        log.write_all(line.as_bytes())
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;

        let is_last = step + 1 == total_steps;
        if (step + 1) % cfg.checkpoint_every == 0 || is_last {
            // held-out monitoring and best-model tracking
            let eval_l1 = if eval_set.is_empty() {
                f64::NAN
            } else {
                mean_eval_l1(&model, manifest, images, eval_set)?
            };
            let improved = eval_set.is_empty() || eval_l1 < best_l1;
            if improved {
                best_l1 = if eval_l1.is_nan() { best_l1 } else { eval_l1 };
                best_step = step + 1;
                save_proxy(&model, &out_dir.join("best.proxy"))?;
            }
            save_proxy(&model, &out_dir.join(format!("ckpt_step{:08}.proxy", step + 1)))?;
            save_proxy(&model, &out_dir.join("ckpt_latest.proxy"))?;
            let mut tensors = blob::TensorMap::new();
            adam_g.to_blob("adam_g", &mut tensors);
            if let (Some(c), Some(ac)) = (critic.as_ref(), adam_c.as_ref()) {
                ac.to_blob("adam_c", &mut tensors);
                for (name, wv) in &c.weights {
                    tensors.insert(format!("w.{name}"), wv.as_ref().clone());
                }
            }
            blob::save(&out_dir.join("state_latest.blob"), &tensors)?;
            write_json_pretty(
                &out_dir.join("state_latest.json"),
                &TrainerState {
                    step: step + 1,
                    best_l1: best_l1.is_finite().then_some(best_l1),
                    best_step,
                    done: is_last,
                },
            )?;
        }
    }

    // return the best checkpoint, annotated with training provenance
    let mut best = load_proxy(&out_dir.join("best.proxy"))?;
    best.metadata = ProxyMetadata {
        training_run: Some(out_dir.display().to_string()),
        train_config: Some(serde_json::to_value(cfg)?),
        fidelity: None,
        training_record_hashes: train_indices
            .iter()
            .map(|&i| manifest.records[i].pixel_sha256.clone())
            .collect(),
    };
    save_proxy(&best, &out_dir.join("best.proxy"))?;
    let _ = best_step;
    Ok(best)
}

/// One critic update over the batch: logistic loss on real/fake pairs plus
/// the R1 penalty on real pairs. The R1 weight gradient uses the
/// central-difference Hessian-vector estimate
/// ∇_w(γ/2 ‖g‖²) ≈ γ [∇_w C(x+εv) − ∇_w C(x−εv)] / (2ε) with v = g.
fn step_critic(
    critic: &mut Critic,
    adam_c: &mut NamedAdam,
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    images: &[Array2<f64>],
    batch: &[usize],
    preds: &[ArrayD<f64>],
) -> Result<()> {
    let (h, w) = manifest.resolution();
    let names = adam_c.names.clone();

    struct CriticOut {
        grads: Vec<ArrayD<f64>>,
    }
    let outs: Vec<Result<CriticOut>> = batch
        .par_iter()
        .zip(preds.par_iter())
        .map(|(&idx, pred)| {
            let u = manifest.records[idx].normalized_params.clone();
            let real = &images[idx];

            // logistic terms
            let tape = Tape::new();
            let bound = critic.bind_weights(&tape, true);
            let real_t = tape.constant(
                real.clone()
                    .into_dyn()
                    .into_shape_with_order(IxDyn(&[1, h, w]))
                    .unwrap(),
            );
            let fake_t = tape.constant(pred.clone());
            let s_real = critic.score_bound(&u, &real_t, &bound);
            let s_fake = critic.score_bound(&u, &fake_t, &bound);
            let loss = s_real.neg().softplus().add(&s_fake.softplus());
            if !loss.scalar_value().is_finite() {
                return Err(Error::Numeric("non-finite critic loss".into()));
            }
            let grads = tape.backward(&loss);
            let mut named: Vec<ArrayD<f64>> = names
                .iter()
                .map(|n| grads.wrt_or_zeros(&bound[n]))
                .collect();

            // R1 weight gradient via central-difference HVP
            if cfg.r1_gamma > 0.0 {
                let (_penalty, gimg) = r1_penalty(critic, &u, real, cfg.r1_gamma);
                let norm = gimg.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    let eps = 1e-4 / norm;
                    let weight_grad_at = |offset: f64| -> Vec<ArrayD<f64>> {
                        let tape = Tape::new();
                        let bound = critic.bind_weights(&tape, true);
                        let mut img = real
                            .clone()
                            .into_dyn()
                            .into_shape_with_order(IxDyn(&[1, h, w]))
                            .unwrap();
                        ndarray::Zip::from(&mut img)
                            .and(&gimg)
                            .for_each(|x, &g| *x += offset * g);
                        let score = critic.score_bound(&u, &tape.constant(img), &bound);
                        let grads = tape.backward(&score);
                        names.iter().map(|n| grads.wrt_or_zeros(&bound[n])).collect()
                    };
                    let plus = weight_grad_at(eps);
                    let minus = weight_grad_at(-eps);
                    for ((acc, p), m) in named.iter_mut().zip(&plus).zip(&minus) {
                        ndarray::Zip::from(acc).and(p).and(m).for_each(|a, &p, &m| {
                            *a += cfg.r1_gamma * (p - m) / (2.0 * eps);
                        });
                    }
                }
            }
            Ok(CriticOut { grads: named })
        })
        .collect();

    let mut mean: Vec<ArrayD<f64>> = names
        .iter()
        .map(|n| ArrayD::zeros(critic.weights[n].raw_dim()))
        .collect();
    let bsz = batch.len() as f64;
    for o in outs {
        let o = o?;
        for (acc, g) in mean.iter_mut().zip(&o.grads) {
            *acc += g;
        }
    }
    for g in &mut mean {
        g.mapv_inplace(|v| v / bsz);
    }
    let mut params: Vec<ArrayD<f64>> = names
        .iter()
        .map(|n| critic.weights[n].as_ref().clone())
        .collect();
    adam_c.adam.step(&mut params, &mean, cfg.critic_lr);
    for (name, p) in names.iter().zip(params) {
        critic.set_weight(name, p);
    }
    Ok(())
}

/// Mean forward L1 of the model over the listed records.
pub fn mean_eval_l1(
    model: &ProxyModel,
    manifest: &DatasetManifest,
    images: &[Array2<f64>],
    indices: &[usize],
) -> Result<f64> {
    let l1s: Vec<Result<f64>> = indices
        .par_iter()
        .map(|&i| {
            let img = model.forward(&manifest.records[i].normalized_params)?;
            let gt = &images[i];
            Ok(img
                .pixels
                .iter()
                .zip(gt.iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / gt.len() as f64)
        })
        .collect();
    let mut sum = 0.0;
    for v in &l1s {
        sum += *v.as_ref().map_err(|e| Error::Numeric(e.to_string()))?;
    }
    Ok(sum / indices.len().max(1) as f64)
}

/// Evaluate a trained proxy on a held-out dataset. Refuses datasets that
/// overlap the training set (detected via record pixel hashes).
pub fn eval_proxy(
    model: &ProxyModel,
    heldout_dir: &Path,
) -> Result<FidelityReport> {
    let manifest = load_manifest(heldout_dir)?;
    if manifest.spec_hash != model.spec.version_hash {
        return Err(Error::SpecHashMismatch {
            expected: model.spec.version_hash.clone(),
            got: manifest.spec_hash.clone(),
        });
    }
    let train_hashes: BTreeSet<&String> =
        model.metadata.training_record_hashes.iter().collect();
    for r in &manifest.records {
        if train_hashes.contains(&r.pixel_sha256) {
            return Err(Error::Data(format!(
                "held-out record {} overlaps the training set",
                r.index
            )));
        }
    }
    let images = dataset_images(heldout_dir, &manifest)?;
    let extractor = FeatureExtractor::seeded(0x5eed);
    let (h, w) = manifest.resolution();

    let per_sample: Vec<Result<(f64, f64)>> = manifest
        .records
        .par_iter()
        .map(|r| {
            let pred = model.forward(&r.normalized_params)?;
            let gt = &images[r.index];
            let l1 = pred
                .pixels
                .iter()
                .zip(gt.iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / gt.len() as f64;
            let tape = Tape::new();
            let p = tape.constant(
                pred.pixels
                    .clone()
                    .into_dyn()
                    .into_shape_with_order(IxDyn(&[1, h, w]))
                    .unwrap(),
            );
            let t = tape.constant(
                gt.clone()
                    .into_dyn()
                    .into_shape_with_order(IxDyn(&[1, h, w]))
                    .unwrap(),
            );
            let fd = extractor.feature_distance(&p, &t)?.scalar_value();
            Ok((l1, fd))
        })
        .collect();

    let mut l1s = Vec::with_capacity(per_sample.len());
    let mut fds = Vec::with_capacity(per_sample.len());
    for r in per_sample {
        let (l1, fd) = r?;
        l1s.push(l1);
        fds.push(fd);
    }
    let mut indexed: Vec<(usize, f64)> = l1s.iter().cloned().enumerate().collect();
    indexed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut sorted = l1s.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |p: f64| -> f64 {
        let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
        sorted[idx]
    };
    Ok(FidelityReport {
        mean_l1: l1s.iter().sum::<f64>() / l1s.len().max(1) as f64,
        p50_l1: pct(0.50),
        p90_l1: pct(0.90),
        p99_l1: pct(0.99),
        mean_feature_distance: fds.iter().sum::<f64>() / fds.len().max(1) as f64,
        worst: indexed.into_iter().take(5).collect(),
        heldout_count: l1s.len(),
    })
}

#[cfg(test)]
#[path = "proxytrain_tests.rs"]
mod tests;
