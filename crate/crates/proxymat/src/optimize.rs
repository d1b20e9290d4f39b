//! Three-stage appearance optimization: filter-only pre-optimization on a
//! style objective, best-of-K initialized joint optimization through the
//! differentiable proxies, and swap-back filter refinement on the original
//! generators.
//!
//! All parameters are optimized in normalized [0,1] units with box
//! projection after every Adam step. Every step logs the style term, the
//! feature term, their Eq-style combination `feat + α·style` (the canonical
//! cross-stage metric used for best-so-far tracking), and the learning rate,
//! so schedule and bookkeeping invariants can be checked from the trace.

use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    apply_params, collect_params, evaluate_graph, evaluate_graph_t, GeneratorMode, GraphEvalOptions,
    MaterialGraph, NodeKind, ProxyStore, ThetaSplit,
};
use crate::paramspace;
use crate::perceptual::{grayscale, l1_sum, multires_factors, FeatureExtractor, FeatureTargets};
use crate::render::{render, RenderSetup};
use crate::tensor::{Tape, Tensor};
use crate::util::adam::{Adam, AdamParams};
use crate::util::rng::{domain, mix};
use crate::util::write_json_pretty;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub lr: f64,
    pub steps: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config { lr: 0.002, steps: 200 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub init_samples: usize,
    pub lr0: f64,
    pub halve_every: usize,
    pub steps: usize,
    pub alpha: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            init_samples: 500,
            lr0: 0.02,
            halve_every: 200,
            steps: 600,
            alpha: 0.05,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Stage3Config {
    pub lr: f64,
    pub steps: usize,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Stage3Config { lr: 0.002, steps: 200 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub adam_betas: (f64, f64),
    /// Stage I is reverted when its relative style-loss improvement stays
    /// below this threshold.
    pub skip_stage1_threshold: f64,
    pub seed: u64,
    pub extractor_seed: u64,
    /// Optional pretrained extractor weight file; the seeded-random backend
    /// is used when absent.
    pub extractor_weights: Option<String>,
    pub render: RenderSetup,
    /// Recorded in artifacts; the implementation is deterministic in either
    /// case (fixed evaluation order throughout).
    pub fixed_math: bool,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            adam_betas: (0.9, 0.999),
            skip_stage1_threshold: 0.02,
            seed: 0,
            extractor_seed: 0x5eed,
            extractor_weights: None,
            render: RenderSetup::default(),
            fixed_math: true,
        }
    }
}

impl OptimizeConfig {
    pub fn total_step_budget(&self) -> usize {
        self.stage1.steps + self.stage2.steps + self.stage3.steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage1.lr <= 0.0 || self.stage2.lr0 <= 0.0 || self.stage3.lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.stage2.alpha < 0.0 || self.skip_stage1_threshold < 0.0 {
            return Err(Error::Config("alpha and thresholds must be >= 0".into()));
        }
        if self.stage2.halve_every == 0 {
            return Err(Error::Config("halve_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// One trace line; written as JSONL per stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub style: f64,
    pub feat: f64,
    pub eq5: f64,
    pub best_eq5: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub stage: u8,
    pub step: usize,
    pub eq5: f64,
    pub theta_g: Vec<f64>,
    pub theta_f: Vec<f64>,
    /// Generator modes when the snapshot was taken (proxy or original).
    pub proxy_mode: bool,
}

/// Per-stage outcome: final parameters live in the graph, losses and traces
/// here.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizationState {
    pub stage: u8,
    pub steps_run: usize,
    pub skipped: bool,
    pub initial_style: f64,
    pub final_style: f64,
    pub initial_feat: f64,
    pub final_feat: f64,
    pub initial_eq5: f64,
    pub final_eq5: f64,
    /// Adam steps applied to θ_g during this stage (zero in stages I/III:
    /// generator parameters are frozen there).
    pub theta_g_adam_steps: u64,
    pub trace: Vec<TraceRecord>,
}

/// Multi-resolution feature/Gram targets of the fixed target image.
pub struct TargetFeatures {
    pub resolution: (usize, usize),
    rungs: Vec<(usize, FeatureTargets)>,
    gray_full: FeatureTargets,
}

/// Precompute target features at every ladder rung, plus grayscale features
/// at full resolution for the initialization search.
pub fn precompute_targets(
    target: &Array3<f64>,
    extractor: &FeatureExtractor,
) -> Result<TargetFeatures> {
    let (c, h, w) = target.dim();
    if c != 3 {
        return Err(Error::Data(format!("target image must be RGB, got {c} channels")));
    }
    let tape = Tape::new();
    let t = tape.constant(target.clone().into_dyn());
    let mut rungs = Vec::new();
    for factor in multires_factors((h, w)) {
        let pooled = if factor == 1 { t.clone() } else { t.avg_pool2(factor) };
        let feats = extractor.features(&pooled)?;
        let grams = extractor.grams(&feats);
        rungs.push((
            factor,
            FeatureTargets {
                feats: feats.iter().map(|x| x.value()).collect(),
                grams: grams.iter().map(|x| x.value()).collect(),
            },
        ));
    }
    if rungs.is_empty() {
        return Err(Error::Data(format!(
            "target {h}x{w} below the smallest loss resolution"
        )));
    }
    let gray = grayscale(&t);
    let gf = extractor.features(&gray)?;
    let gray_full = FeatureTargets {
        feats: gf.iter().map(|x| x.value()).collect(),
        grams: extractor.grams(&gf).iter().map(|x| x.value()).collect(),
    };
    Ok(TargetFeatures {
        resolution: (h, w),
        rungs,
        gray_full,
    })
}

/// Style and feature distances of a rendered image against the precomputed
/// targets, summed over the resolution ladder.
fn multires_losses(
    rendered: &Tensor,
    targets: &TargetFeatures,
    extractor: &FeatureExtractor,
) -> Result<(Tensor, Tensor)> {
    let tape = rendered.tape().clone();
    let mut style: Option<Tensor> = None;
    let mut feat: Option<Tensor> = None;
    for (factor, tf) in &targets.rungs {
        let pooled = if *factor == 1 {
            rendered.clone()
        } else {
            rendered.avg_pool2(*factor)
        };
        let feats = extractor.features(&pooled)?;
        let grams = extractor.grams(&feats);
        let tf_feats: Vec<Tensor> = tf
            .feats
            .iter()
            .map(|a| tape.constant_shared(a.clone()))
            .collect();
        let tf_grams: Vec<Tensor> = tf
            .grams
            .iter()
            .map(|a| tape.constant_shared(a.clone()))
            .collect();
        let f = l1_sum(&feats, &tf_feats);
        let s = l1_sum(&grams, &tf_grams);
        feat = Some(match feat {
            Some(t) => t.add(&f),
            None => f,
        });
        style = Some(match style {
            Some(t) => t.add(&s),
            None => s,
        });
    }
    Ok((style.expect("rungs"), feat.expect("rungs")))
}

struct StepOutcome {
    style: f64,
    feat: f64,
    eq5: f64,
    grad_g: Option<Vec<f64>>,
    grad_f: Option<Vec<f64>>,
}

/// Evaluate the current graph: losses plus (optionally) gradients w.r.t. the
/// normalized parameter vectors.
fn evaluate_step(
    g: &MaterialGraph,
    targets: &TargetFeatures,
    cfg: &OptimizeConfig,
    proxies: &ProxyStore,
    extractor: &FeatureExtractor,
    alpha: f64,
    want_grads: bool,
) -> Result<StepOutcome> {
    let tape = Tape::new();
    let eval = evaluate_graph_t(
        g,
        &tape,
        proxies,
        &GraphEvalOptions {
            resolution: targets.resolution,
            differentiable: want_grads,
        },
    )?;
    let image = render(&eval.maps, &cfg.render)?;
    let (style_t, feat_t) = multires_losses(&image, targets, extractor)?;
    let style = style_t.scalar_value();
    let feat = feat_t.scalar_value();
    let eq5 = feat + alpha * style;
    if !style.is_finite() || !feat.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (style {style}, feat {feat})"
        )));
    }
    let (grad_g, grad_f) = if want_grads {
        let loss = feat_t.add(&style_t.mul_c(alpha));
        let grads = tape.backward(&loss);
        let mut gg = Vec::new();
        let mut gf = Vec::new();
        for n in &g.nodes {
            match &n.kind {
                NodeKind::Generator { params_norm, .. } => {
                    if let Some(leaf) = eval.generator_leaves.get(&n.id) {
                        let gv = grads.wrt_or_zeros(leaf);
                        gg.extend(gv.iter().cloned());
                    } else {
                        gg.extend(std::iter::repeat_n(0.0, params_norm.len()));
                    }
                }
                NodeKind::Filter { .. } => {
                    let leaf = &eval.filter_leaves[&n.id];
                    let gv = grads.wrt_or_zeros(leaf);
                    gf.extend(gv.iter().cloned());
                }
                NodeKind::Output { .. } => {}
            }
        }
        (Some(gg), Some(gf))
    } else {
        (None, None)
    };
    Ok(StepOutcome {
        style,
        feat,
        eq5,
        grad_g,
        grad_f,
    })
}

/// Objective selector: stages I/III minimize the style term; stage II
/// minimizes feat + α·style.
#[derive(Clone, Copy, PartialEq)]
enum Objective {
    StyleOnly,
    Combined,
}

struct StageDriver<'a> {
    stage: u8,
    steps: usize,
    lr0: f64,
    halve_every: Option<usize>,
    objective: Objective,
    optimize_g: bool,
    cfg: &'a OptimizeConfig,
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    g: &mut MaterialGraph,
    targets: &TargetFeatures,
    proxies: &ProxyStore,
    extractor: &FeatureExtractor,
    driver: &StageDriver<'_>,
    best: &mut Option<BestSnapshot>,
) -> Result<OptimizationState> {
    let alpha = driver.cfg.stage2.alpha;
    let theta0 = collect_params(g);
    let mut theta = theta0.clone();

    let mut adam_f = Adam::new(
        AdamParams {
            betas: driver.cfg.adam_betas,
            eps: 1e-8,
        },
        &[&[theta.theta_f.len()]],
    );
    let mut adam_g = Adam::new(
        AdamParams {
            betas: driver.cfg.adam_betas,
            eps: 1e-8,
        },
        &[&[theta.theta_g.len()]],
    );

    let initial = evaluate_step(g, targets, driver.cfg, proxies, extractor, alpha, false)?;
    let mut trace = Vec::with_capacity(driver.steps);
    let proxy_mode = g.nodes.iter().any(|n| {
        matches!(
            n.kind,
            NodeKind::Generator {
                mode: GeneratorMode::Proxy,
                ..
            }
        )
    });

    let consider_best =
        |eq5: f64, step: usize, theta: &ThetaSplit, best: &mut Option<BestSnapshot>| {
            let better = best.as_ref().map(|b| eq5 < b.eq5).unwrap_or(true);
            if better {
                *best = Some(BestSnapshot {
                    stage: driver.stage,
                    step,
                    eq5,
                    theta_g: theta.theta_g.clone(),
                    theta_f: theta.theta_f.clone(),
                    proxy_mode,
                });
            }
        };
    consider_best(initial.eq5, 0, &theta, best);

    let mut last = initial.eq5;
    for step in 0..driver.steps {
        let lr = match driver.halve_every {
            Some(k) => driver.lr0 * 0.5f64.powi((step / k) as i32),
            None => driver.lr0,
        };
        let out = evaluate_step(g, targets, driver.cfg, proxies, extractor, alpha, true)?;
        consider_best(out.eq5, step, &theta, best);
        last = out.eq5;
        trace.push(TraceRecord {
            stage: driver.stage,
            step,
            lr,
            style: out.style,
            feat: out.feat,
            eq5: out.eq5,
            best_eq5: best.as_ref().map(|b| b.eq5).unwrap_or(out.eq5),
        });

        // gradient of the stage objective
        let (gg, gf) = match driver.objective {
            Objective::Combined => (out.grad_g.unwrap(), out.grad_f.unwrap()),
            Objective::StyleOnly => {
                // rebuild gradients for the style-only objective
                let tape = Tape::new();
                let eval = evaluate_graph_t(
                    g,
                    &tape,
                    proxies,
                    &GraphEvalOptions {
                        resolution: targets.resolution,
                        differentiable: true,
                    },
                )?;
                let image = render(&eval.maps, &driver.cfg.render)?;
                let (style_t, _feat_t) = multires_losses(&image, targets, extractor)?;
                let grads = tape.backward(&style_t);
                let mut gg = Vec::new();
                let mut gf = Vec::new();
                for n in &g.nodes {
                    match &n.kind {
                        NodeKind::Generator { params_norm, .. } => {
                            if let Some(leaf) = eval.generator_leaves.get(&n.id) {
                                gg.extend(grads.wrt_or_zeros(leaf).iter().cloned());
                            } else {
                                gg.extend(std::iter::repeat_n(0.0, params_norm.len()));
                            }
                        }
                        NodeKind::Filter { .. } => {
                            gf.extend(grads.wrt_or_zeros(&eval.filter_leaves[&n.id]).iter().cloned());
                        }
                        NodeKind::Output { .. } => {}
                    }
                }
                (gg, gf)
            }
        };

        // Adam + box projection
        if !theta.theta_f.is_empty() {
            let mut p = vec![ArrayD::from_shape_vec(IxDyn(&[theta.theta_f.len()]), theta.theta_f.clone()).unwrap()];
            let grad = vec![ArrayD::from_shape_vec(IxDyn(&[gf.len()]), gf).unwrap()];
            adam_f.step(&mut p, &grad, lr);
            theta.theta_f = p[0].iter().map(|v| v.clamp(0.0, 1.0)).collect();
        }
        if driver.optimize_g && !theta.theta_g.is_empty() {
            let mut p = vec![ArrayD::from_shape_vec(IxDyn(&[theta.theta_g.len()]), theta.theta_g.clone()).unwrap()];
            let grad = vec![ArrayD::from_shape_vec(IxDyn(&[gg.len()]), gg).unwrap()];
            adam_g.step(&mut p, &grad, lr);
            theta.theta_g = p[0].iter().map(|v| v.clamp(0.0, 1.0)).collect();
        }
        apply_params(g, &theta)?;
    }

    let final_eval = evaluate_step(g, targets, driver.cfg, proxies, extractor, alpha, false)?;
    consider_best(final_eval.eq5, driver.steps, &theta, best);
    let _ = last;

    Ok(OptimizationState {
        stage: driver.stage,
        steps_run: driver.steps,
        skipped: false,
        initial_style: initial.style,
        final_style: final_eval.style,
        initial_feat: initial.feat,
        final_feat: final_eval.feat,
        initial_eq5: initial.eq5,
        final_eq5: final_eval.eq5,
        theta_g_adam_steps: adam_g.t,
        trace,
    })
}

/// Stage I: filter-only calibration on the multi-resolution style loss with
/// generators fixed in original mode. When the relative improvement stays
/// below the configured threshold the stage is reverted and flagged skipped.
pub fn stage1_preoptimize(
    g: &mut MaterialGraph,
    targets: &TargetFeatures,
    cfg: &OptimizeConfig,
    proxies: &ProxyStore,
    extractor: &FeatureExtractor,
    best: &mut Option<BestSnapshot>,
) -> Result<OptimizationState> {
    for id in g.generator_node_ids() {
        g.set_mode(&id, GeneratorMode::Original)?;
    }
    let theta0 = collect_params(g);
    let driver = StageDriver {
        stage: 1,
        steps: cfg.stage1.steps,
        lr0: cfg.stage1.lr,
        halve_every: None,
        objective: Objective::StyleOnly,
        optimize_g: false,
        cfg,
    };
    let mut state = run_stage(g, targets, proxies, extractor, &driver, best)?;
    let improvement = if state.initial_style > 1e-12 {
        (state.initial_style - state.final_style) / state.initial_style
    } else {
        0.0
    };
    if improvement < cfg.skip_stage1_threshold {
        apply_params(g, &theta0)?;
        state.skipped = true;
        state.final_style = state.initial_style;
        state.final_feat = state.initial_feat;
        state.final_eq5 = state.initial_eq5;
    }
    Ok(state)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InitSearchResult {
    pub theta_g: Vec<f64>,
    pub best_index: usize,
    pub best_score: f64,
    pub candidates: usize,
}

/// Draw one normalized θ_g candidate per generator node from the priors.
fn sample_candidate(g: &MaterialGraph, seed: u64, index: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (node_idx, n) in g.nodes.iter().enumerate() {
        if let NodeKind::Generator { generator, .. } = &n.kind {
            let spec = crate::generators::generator_spec(generator)?;
            let pv = paramspace::sample_prior(
                spec,
                mix(seed, &[domain::INIT_SEARCH, node_idx as u64]),
                index as u64,
            )?;
            out.extend(paramspace::normalize(&pv, spec)?);
        }
    }
    Ok(out)
}

/// Score candidates by the feature distance between grayscale renders and
/// the grayscale target (full resolution), returning the argmin with
/// lowest-index tie-breaking. Candidate evaluation is forward-only and may
/// run in parallel; the reduction is index-ordered and deterministic.
pub fn score_candidates(
    g: &MaterialGraph,
    targets: &TargetFeatures,
    cfg: &OptimizeConfig,
    proxies: &ProxyStore,
    extractor: &FeatureExtractor,
    candidates: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let base_theta = collect_params(g);
    candidates
        .par_iter()
        .map(|cand| -> Result<f64> {
            let mut trial = g.clone();
            let theta = ThetaSplit {
                theta_g: cand.clone(),
                theta_f: base_theta.theta_f.clone(),
            };
            apply_params(&mut trial, &theta)?;
            let tape = Tape::new();
            let eval = evaluate_graph_t(
                &trial,
                &tape,
                proxies,
                &GraphEvalOptions {
                    resolution: targets.resolution,
                    differentiable: false,
                },
            )?;
            let image = render(&eval.maps, &cfg.render)?;
            let gray = grayscale(&image);
            let feats = extractor.features(&gray)?;
            let tf: Vec<Tensor> = targets
                .gray_full
                .feats
                .iter()
                .map(|a| tape.constant_shared(a.clone()))
                .collect();
            Ok(l1_sum(&feats, &tf).scalar_value())
        })
        .collect()
}

/// Stage II initialization: sample `k` candidate θ_g from the priors and
/// keep the one whose grayscale render sits closest to the target in
/// feature space. The incumbent θ_g competes as candidate 0, so a start
/// that is already better than every sample survives the search.
pub fn stage2_init_search(
    g: &MaterialGraph,
    targets: &TargetFeatures,
    cfg: &OptimizeConfig,
    proxies: &ProxyStore,
    extractor: &FeatureExtractor,
    k: usize,
) -> Result<InitSearchResult> {
    let mut candidates = vec![collect_params(g).theta_g];
    for i in 0..k {
        candidates.push(sample_candidate(g, cfg.seed, i)?);
    }
    stage2_init_search_with_candidates(g, targets, cfg, proxies, extractor, &candidates)
}

/// Initialization search over explicit candidates (used by the synthetic
/// recovery harness to inject the true parameters among prior samples).
pub fn stage2_init_search_with_candidates(
    g: &MaterialGraph,
    targets: &TargetFeatures,
    cfg: &OptimizeConfig,
    proxies: &ProxyStore,
    extractor: &FeatureExtractor,
    candidates: &[Vec<f64>],
) -> Result<InitSearchResult> {
    if candidates.is_empty() {
        return Err(Error::Config("init search needs at least one candidate".into()));
    }
    let scores = score_candidates(g, targets, cfg, proxies, extractor, candidates)?;
    let mut best_index = 0usize;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best_index] {
            best_index = i;
        }
    }
    Ok(InitSearchResult {
        theta_g: candidates[best_index].clone(),
        best_index,
        best_score: scores[best_index],
        candidates: candidates.len(),
    })
}

/// Stage II: all generators in proxy mode, joint optimization of (θ_g, θ_f)
/// on `feat + α·style` with the halving learning-rate schedule.
pub fn stage2_global(
    g: &mut MaterialGraph,
    targets: &TargetFeatures,
    cfg: &OptimizeConfig,
    proxies: &ProxyStore,
    extractor: &FeatureExtractor,
    init: Option<&[f64]>,
    best: &mut Option<BestSnapshot>,
) -> Result<OptimizationState> {
    for id in g.generator_node_ids() {
        g.set_mode(&id, GeneratorMode::Proxy)?;
    }
    if let Some(theta_g) = init {
        let mut theta = collect_params(g);
        if theta_g.len() != theta.theta_g.len() {
            return Err(Error::DimensionMismatch {
                expected: theta.theta_g.len(),
                got: theta_g.len(),
                context: "stage2 init".into(),
            });
        }
        theta.theta_g = theta_g.to_vec();
        apply_params(g, &theta)?;
    }
    let driver = StageDriver {
        stage: 2,
        steps: cfg.stage2.steps,
        lr0: cfg.stage2.lr0,
        halve_every: Some(cfg.stage2.halve_every),
        objective: Objective::Combined,
        optimize_g: true,
        cfg,
    };
    run_stage(g, targets, proxies, extractor, &driver, best)
}

/// Stage III: swap back to the original generators (θ_g grid-snapped) and
/// refine θ_f on the style objective with the fine learning rate.
pub fn stage3_refine(
    g: &mut MaterialGraph,
    targets: &TargetFeatures,
    cfg: &OptimizeConfig,
    proxies: &ProxyStore,
    extractor: &FeatureExtractor,
    best: &mut Option<BestSnapshot>,
) -> Result<OptimizationState> {
    for id in g.generator_node_ids() {
        g.set_mode(&id, GeneratorMode::Original)?;
    }
    let driver = StageDriver {
        stage: 3,
        steps: cfg.stage3.steps,
        lr0: cfg.stage3.lr,
        halve_every: None,
        objective: Objective::StyleOnly,
        optimize_g: false,
        cfg,
    };
    run_stage(g, targets, proxies, extractor, &driver, best)
}

#[derive(Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<OptimizationState>,
    pub init_search: Option<InitSearchResult>,
    pub best: BestSnapshot,
    pub config: OptimizeConfig,
    pub graph_hash_initial: String,
    pub graph_hash_final: String,
    pub extractor_provenance: crate::perceptual::Provenance,
    pub oracle_proxies: bool,
}

pub struct PipelineResult {
    pub graph: MaterialGraph,
    pub report: PipelineReport,
}

/// Run the full three-stage pipeline against a target image and persist a
/// result bundle: resolved config, per-stage traces and snapshots, the final
/// graph, maps/renders, and a report. Re-running with identical inputs and
/// seed reproduces the traces bit for bit.
pub fn run_pipeline(
    g0: &MaterialGraph,
    target: &Array3<f64>,
    cfg: &OptimizeConfig,
    proxies: &ProxyStore,
    out_dir: &Path,
) -> Result<PipelineResult> {
    cfg.validate()?;
    g0.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let extractor = FeatureExtractor::build(
        cfg.extractor_seed,
        cfg.extractor_weights.as_deref().map(Path::new),
    )?;
    let targets = precompute_targets(target, &extractor)?;
    let mut g = g0.clone();
    let mut best: Option<BestSnapshot> = None;

    write_json_pretty(&out_dir.join("config.json"), cfg)?;
    crate::util::imageio::save_rgb8(&out_dir.join("target.png"), target)?;
    snapshot(&g, proxies, &targets, cfg, out_dir, "stage0_init")?;

    let s1 = stage1_preoptimize(&mut g, &targets, cfg, proxies, &extractor, &mut best)?;
    write_trace(out_dir, 1, &s1.trace)?;
    snapshot(&g, proxies, &targets, cfg, out_dir, "stage1")?;

    let init = if g.generator_node_ids().is_empty() {
        None
    } else {
        Some(stage2_init_search(
            &g,
            &targets,
            cfg,
            proxies,
            &extractor,
            cfg.stage2.init_samples,
        )?)
    };
    let s2 = stage2_global(
        &mut g,
        &targets,
        cfg,
        proxies,
        &extractor,
        init.as_ref().map(|i| i.theta_g.as_slice()),
        &mut best,
    )?;
    write_trace(out_dir, 2, &s2.trace)?;
    snapshot(&g, proxies, &targets, cfg, out_dir, "stage2")?;

    let s3 = stage3_refine(&mut g, &targets, cfg, proxies, &extractor, &mut best)?;
    write_trace(out_dir, 3, &s3.trace)?;
    snapshot(&g, proxies, &targets, cfg, out_dir, "stage3_final")?;

    g.save(&out_dir.join("final_graph.json"))?;
    let report = PipelineReport {
        stages: vec![s1, s2, s3],
        init_search: init,
        best: best.expect("at least one evaluation"),
        config: cfg.clone(),
        graph_hash_initial: g0.structural_hash()?,
        graph_hash_final: g.structural_hash()?,
        extractor_provenance: extractor.config.provenance.clone(),
        oracle_proxies: proxies.is_oracle(),
    };
    write_json_pretty(&out_dir.join("report.json"), &report)?;
    Ok(PipelineResult { graph: g, report })
}

fn write_trace(out_dir: &Path, stage: u8, trace: &[TraceRecord]) -> Result<()> {
    let dir = out_dir.join("traces");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut buf = String::new();
    for t in trace {
        buf.push_str(&serde_json::to_string(t)?);
        buf.push('\n');
    }
    crate::util::atomic_write(&dir.join(format!("stage{stage}.jsonl")), buf.as_bytes())
}

/// Persist a graph snapshot with its maps and render.
fn snapshot(
    g: &MaterialGraph,
    proxies: &ProxyStore,
    targets: &TargetFeatures,
    cfg: &OptimizeConfig,
    out_dir: &Path,
    tag: &str,
) -> Result<()> {
    let dir = out_dir.join("snapshots");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    g.save(&dir.join(format!("{tag}_graph.json")))?;
    // snapshots always render through the original generators
    let mut concrete = g.clone();
    for id in concrete.generator_node_ids() {
        concrete.set_mode(&id, GeneratorMode::Original)?;
    }
    let maps = evaluate_graph(&concrete, proxies, targets.resolution)?;
    let img = crate::render::render_arrays(
        &maps.albedo,
        &maps.normal,
        &maps.roughness,
        &maps.metallic,
        &cfg.render,
    )?;
    crate::util::imageio::save_rgb8(&dir.join(format!("{tag}_render.png")), &img)?;
    Ok(())
}

#[derive(Serialize)]
struct ThetaDump<'a> {
    theta_g: &'a [f64],
    theta_f: &'a [f64],
}

/// Convenience: dump current parameters for reports.
pub fn theta_json(g: &MaterialGraph) -> Result<serde_json::Value> {
    let t = collect_params(g);
    Ok(serde_json::to_value(ThetaDump {
        theta_g: &t.theta_g,
        theta_f: &t.theta_f,
    })?)
}

#[cfg(test)]
#[path = "optimize_tests.rs"]
mod tests;
