//! Differentiable filter nodes: smooth image-to-image operators with
//! continuous parameters, the trainable half of a material graph.
//!
//! All filters use torus-periodic boundary handling (blur, warp, and
//! transform wrap), so they preserve tileability. Parameters enter as a
//! normalized [0,1] vector and are mapped onto their documented raw ranges
//! inside the tape, which keeps optimization box-constrained and gradients
//! flowing end to end.
//!
//! Non-smooth sets are documented per filter: bilinear resampling (transform,
//! warp) has kinks at texel boundaries, colorize at the tent-basis knot
//! (gray = 0.5), and levels at the clamp edges. Gradient checks probe away
//! from these sets.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv::PadMode;
use crate::tensor::{Tape, Tensor};

/// Filter node types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Blend,
    Levels,
    Hsl,
    Blur,
    Transform,
    Warp,
    Colorize,
    NormalFromHeight,
}

pub const FILTER_KINDS: [FilterKind; 8] = [
    FilterKind::Blend,
    FilterKind::Levels,
    FilterKind::Hsl,
    FilterKind::Blur,
    FilterKind::Transform,
    FilterKind::Warp,
    FilterKind::Colorize,
    FilterKind::NormalFromHeight,
];

/// One filter parameter: raw range and default.
#[derive(Clone, Debug, Serialize)]
pub struct FilterParamDef {
    pub key: &'static str,
    pub lo: f64,
    pub hi: f64,
    pub default: f64,
}

const fn def(key: &'static str, lo: f64, hi: f64, default: f64) -> FilterParamDef {
    FilterParamDef { key, lo, hi, default }
}

static BLEND_DEFS: [FilterParamDef; 1] = [def("opacity", 0.0, 1.0, 0.5)];
static LEVELS_DEFS: [FilterParamDef; 5] = [
    def("in_lo", 0.0, 0.5, 0.0),
    def("in_hi", 0.5, 1.0, 1.0),
    def("gamma", 0.25, 4.0, 1.0),
    def("out_lo", 0.0, 1.0, 0.0),
    def("out_hi", 0.0, 1.0, 1.0),
];
static HSL_DEFS: [FilterParamDef; 3] = [
    def("hue_shift", -0.5, 0.5, 0.0),
    def("saturation", -1.0, 1.0, 0.0),
    def("lightness", -0.5, 0.5, 0.0),
];
static BLUR_DEFS: [FilterParamDef; 1] = [def("sigma", 0.0, 8.0, 1.0)];
static TRANSFORM_DEFS: [FilterParamDef; 5] = [
    def("scale_x", 0.25, 4.0, 1.0),
    def("scale_y", 0.25, 4.0, 1.0),
    def("rotation", -0.5, 0.5, 0.0),
    def("offset_x", -1.0, 1.0, 0.0),
    def("offset_y", -1.0, 1.0, 0.0),
];
static WARP_DEFS: [FilterParamDef; 1] = [def("intensity", -4.0, 4.0, 1.0)];
static COLORIZE_DEFS: [FilterParamDef; 9] = [
    def("c0_r", 0.0, 1.0, 0.0),
    def("c0_g", 0.0, 1.0, 0.0),
    def("c0_b", 0.0, 1.0, 0.0),
    def("c1_r", 0.0, 1.0, 0.5),
    def("c1_g", 0.0, 1.0, 0.5),
    def("c1_b", 0.0, 1.0, 0.5),
    def("c2_r", 0.0, 1.0, 1.0),
    def("c2_g", 0.0, 1.0, 1.0),
    def("c2_b", 0.0, 1.0, 1.0),
];
static NORMAL_DEFS: [FilterParamDef; 1] = [def("intensity", 0.0, 8.0, 2.0)];

/// Parameter schema per filter kind.
pub fn param_defs(kind: FilterKind) -> &'static [FilterParamDef] {
    match kind {
        FilterKind::Blend => &BLEND_DEFS,
        FilterKind::Levels => &LEVELS_DEFS,
        FilterKind::Hsl => &HSL_DEFS,
        FilterKind::Blur => &BLUR_DEFS,
        FilterKind::Transform => &TRANSFORM_DEFS,
        FilterKind::Warp => &WARP_DEFS,
        FilterKind::Colorize => &COLORIZE_DEFS,
        FilterKind::NormalFromHeight => &NORMAL_DEFS,
    }
}

/// Number of image inputs a filter takes.
pub fn arity(kind: FilterKind) -> usize {
    match kind {
        FilterKind::Blend | FilterKind::Warp => 2,
        _ => 1,
    }
}

/// Output channel count given input channel counts; validates arity and
/// per-kind channel requirements.
pub fn output_channels(kind: FilterKind, inputs: &[usize]) -> Result<usize> {
    if inputs.len() != arity(kind) {
        return Err(Error::Graph(format!(
            "{kind:?} expects {} inputs, got {}",
            arity(kind),
            inputs.len()
        )));
    }
    let bad = |msg: String| Err(Error::Graph(msg));
    match kind {
        FilterKind::Blend => {
            if inputs[0] != inputs[1] {
                return bad(format!("blend inputs differ: {} vs {}", inputs[0], inputs[1]));
            }
            Ok(inputs[0])
        }
        FilterKind::Levels | FilterKind::Blur | FilterKind::Transform => Ok(inputs[0]),
        FilterKind::Hsl => {
            if inputs[0] != 3 {
                return bad(format!("hsl needs a 3-channel input, got {}", inputs[0]));
            }
            Ok(3)
        }
        FilterKind::Warp => {
            if inputs[1] != 1 {
                return bad(format!("warp field must be 1-channel, got {}", inputs[1]));
            }
            Ok(inputs[0])
        }
        FilterKind::Colorize | FilterKind::NormalFromHeight => {
            if inputs[0] != 1 {
                return bad(format!("{kind:?} needs a 1-channel input, got {}", inputs[0]));
            }
            Ok(3)
        }
    }
}

/// Map raw parameter values onto [0,1] per the registry ranges.
pub fn normalize_values(kind: FilterKind, raw: &[f64]) -> Result<Vec<f64>> {
    let defs = param_defs(kind);
    if raw.len() != defs.len() {
        return Err(Error::DimensionMismatch {
            expected: defs.len(),
            got: raw.len(),
            context: format!("{kind:?} params"),
        });
    }
    defs.iter()
        .zip(raw)
        .map(|(d, &v)| {
            if v < d.lo || v > d.hi || !v.is_finite() {
                return Err(Error::OutOfRange {
                    key: d.key.to_string(),
                    value: v,
                    lo: d.lo,
                    hi: d.hi,
                });
            }
            Ok((v - d.lo) / (d.hi - d.lo))
        })
        .collect()
}

/// Inverse of [`normalize_values`].
pub fn denormalize_values(kind: FilterKind, u: &[f64]) -> Result<Vec<f64>> {
    let defs = param_defs(kind);
    if u.len() != defs.len() {
        return Err(Error::DimensionMismatch {
            expected: defs.len(),
            got: u.len(),
            context: format!("{kind:?} normalized params"),
        });
    }
    Ok(defs
        .iter()
        .zip(u)
        .map(|(d, &c)| d.lo + c * (d.hi - d.lo))
        .collect())
}

/// Default normalized parameter vector.
pub fn default_normalized(kind: FilterKind) -> Vec<f64> {
    param_defs(kind)
        .iter()
        .map(|d| (d.default - d.lo) / (d.hi - d.lo))
        .collect()
}

/// Machine-readable registry (kinds, ranges, arity) for the graph loader
/// and external tooling.
pub fn registry_json() -> serde_json::Value {
    let kinds: Vec<serde_json::Value> = FILTER_KINDS
        .iter()
        .map(|&k| {
            serde_json::json!({
                "kind": serde_json::to_value(k).unwrap(),
                "arity": arity(k),
                "params": param_defs(k),
            })
        })
        .collect();
    serde_json::json!({ "version": 1, "filters": kinds })
}

/// Apply a filter inside a tape. `params` is the normalized [0,1] parameter
/// vector (shape [n]); `inputs` are [C,H,W] images sharing one resolution.
/// The output is differentiable w.r.t. both.
pub fn apply_filter(kind: FilterKind, params: &Tensor, inputs: &[&Tensor]) -> Result<Tensor> {
    let defs = param_defs(kind);
    if params.shape() != [defs.len()] {
        return Err(Error::DimensionMismatch {
            expected: defs.len(),
            got: params.numel(),
            context: format!("{kind:?} params tensor"),
        });
    }
    let chans: Vec<usize> = inputs.iter().map(|t| t.shape()[0]).collect();
    output_channels(kind, &chans)?;
    for t in inputs {
        if t.shape()[1..] != inputs[0].shape()[1..] {
            return Err(Error::Graph("filter inputs must share resolution".into()));
        }
    }
    // raw parameter scalars, denormalized in-graph
    let raw: Vec<Tensor> = defs
        .iter()
        .enumerate()
        .map(|(i, d)| params.slice_c(i, 1).mul_c(d.hi - d.lo).add_c(d.lo))
        .collect();
    let out = match kind {
        FilterKind::Blend => blend(&raw[0], inputs[0], inputs[1]),
        FilterKind::Levels => levels(&raw, inputs[0]),
        FilterKind::Hsl => hsl(&raw, inputs[0]),
        FilterKind::Blur => blur(&raw[0], inputs[0]),
        FilterKind::Transform => transform(&raw, inputs[0]),
        FilterKind::Warp => warp(&raw[0], inputs[0], inputs[1]),
        FilterKind::Colorize => colorize(&raw, inputs[0]),
        FilterKind::NormalFromHeight => normal_from_height(&raw[0], inputs[0]),
    };
    Ok(out)
}

/// bg + opacity * (fg - bg); exact at both endpoints.
fn blend(opacity: &Tensor, fg: &Tensor, bg: &Tensor) -> Tensor {
    bg.add(&fg.sub(bg).mul_scalar_t(opacity))
}

/// Remap levels: t = clamp01((x - in_lo)/(in_hi - in_lo)), then t^(1/gamma),
/// then out_lo + (out_hi - out_lo) * t. The pow base is floored at 1e-12 to
/// keep gradients finite at t = 0.
fn levels(raw: &[Tensor], x: &Tensor) -> Tensor {
    let (in_lo, in_hi, gamma, out_lo, out_hi) = (&raw[0], &raw[1], &raw[2], &raw[3], &raw[4]);
    let denom_inv = in_hi.sub(in_lo).max_c(1e-4).pow_c(-1.0);
    let t = x
        .add_scalar_t(&in_lo.neg())
        .mul_scalar_t(&denom_inv)
        .clamp01();
    let exponent = gamma.pow_c(-1.0);
    let tg = t.max_c(1e-12).pow_ts(&exponent);
    let span = out_hi.sub(out_lo);
    tg.mul_scalar_t(&span).add_scalar_t(out_lo)
}

/// Saturation scale and lightness shift around the luma axis, plus a hue
/// rotation about the gray diagonal (Rodrigues form, smooth everywhere).
fn hsl(raw: &[Tensor], x: &Tensor) -> Tensor {
    let (hue_shift, saturation, lightness) = (&raw[0], &raw[1], &raw[2]);
    let gray = crate::perceptual::grayscale(x); // [1,H,W]
    let gray3 = Tensor::concat_c(&[&gray, &gray, &gray]);
    // saturation in [-1,1]: -1 -> grayscale, 0 -> identity, 1 -> doubled
    let sat_scale = saturation.add_c(1.0);
    let sat = gray3.add(&x.sub(&gray3).mul_scalar_t(&sat_scale));

    // hue rotation about a = (1,1,1)/sqrt(3) by angle theta = 2π·hue_shift:
    // R = cosθ·I + (1-cosθ)/3·J + sinθ/sqrt(3)·K with J all-ones, K the
    // cross-product matrix of a.
    let theta = hue_shift.mul_c(std::f64::consts::TAU);
    let c = theta.cos_t();
    let s = theta.sin_t();
    let one_minus_c_third = c.neg().add_c(1.0).mul_c(1.0 / 3.0);
    let s_div = s.mul_c(1.0 / 3f64.sqrt());

    let ch = |i: usize| sat.slice_c(i, 1);
    let (r, g, b) = (ch(0), ch(1), ch(2));
    let sum = r.add(&g).add(&b);
    let rot = |own: &Tensor, prev: &Tensor, next: &Tensor| -> Tensor {
        // cosθ·own + (1-cosθ)/3·sum + s/√3·(prev - next)
        own.mul_scalar_t(&c)
            .add(&sum.mul_scalar_t(&one_minus_c_third))
            .add(&prev.sub(next).mul_scalar_t(&s_div))
    };
    let r2 = rot(&r, &b, &g);
    let g2 = rot(&g, &r, &b);
    let b2 = rot(&b, &g, &r);
    let rotated = Tensor::concat_c(&[&r2, &g2, &b2]);

    let shift = lightness.clone();
    rotated
        .add_scalar_t(&shift)
        .clamp01()
}

const BLUR_RADIUS: usize = 24; // covers 3σ at the top of the sigma range

/// Separable periodic Gaussian blur with the kernel built in-graph from
/// sigma, so the blur is differentiable in its parameter. sigma = 0
/// degenerates to the exact identity kernel.
fn blur(sigma: &Tensor, x: &Tensor) -> Tensor {
    let tape = x.tape().clone();
    let k = 2 * BLUR_RADIUS + 1;
    let offsets: Vec<f64> = (0..k).map(|i| i as f64 - BLUR_RADIUS as f64).collect();
    let d2 = tape.constant(ArrayD::from_shape_vec(IxDyn(&[k]), offsets.iter().map(|d| d * d).collect()).unwrap());
    let sigma_eff = sigma.max_c(1e-4);
    let neg_inv = sigma_eff.sqr().mul_c(2.0).pow_c(-1.0).neg();
    let weights = d2.mul_scalar_t(&neg_inv).exp_t();
    let norm = weights.sum_all().pow_c(-1.0);
    let kernel = weights.mul_scalar_t(&norm);
    let kh = kernel.reshape(&[1, 1, k, 1]);
    let kw = kernel.reshape(&[1, 1, 1, k]);

    let c = x.shape()[0];
    let mut chans = Vec::with_capacity(c);
    for ci in 0..c {
        let ch = x.slice_c(ci, 1);
        let h = ch.conv2d(&kw, None, 1, PadMode::Circular);
        chans.push(h.conv2d(&kh, None, 1, PadMode::Circular));
    }
    let refs: Vec<&Tensor> = chans.iter().collect();
    Tensor::concat_c(&refs)
}

/// Inverse-mapped affine transform with periodic bilinear sampling:
/// out(p) = in(S⁻¹·R(-θ)·(p - 0.5 - offset) + 0.5). Rotation is in turns.
fn transform(raw: &[Tensor], x: &Tensor) -> Tensor {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (gx, gy) = transform_grid(raw, &x.tape().clone(), h, w);
    x.bilinear_wrap(&gx, &gy)
}

fn transform_grid(raw: &[Tensor], tape: &Tape, h: usize, w: usize) -> (Tensor, Tensor) {
    let (scale_x, scale_y, rotation, offset_x, offset_y) =
        (&raw[0], &raw[1], &raw[2], &raw[3], &raw[4]);
    let (u0, v0) = coord_grids(tape, h, w);
    let theta = rotation.mul_c(std::f64::consts::TAU);
    let (c, s) = (theta.cos_t(), theta.sin_t());
    let qx = u0.add_c(-0.5).add_scalar_t(&offset_x.neg());
    let qy = v0.add_c(-0.5).add_scalar_t(&offset_y.neg());
    // R(-θ) = [cos, sin; -sin, cos]
    let rx = qx.mul_scalar_t(&c).add(&qy.mul_scalar_t(&s));
    let ry = qy.mul_scalar_t(&c).sub(&qx.mul_scalar_t(&s));
    let gx = rx.mul_scalar_t(&scale_x.pow_c(-1.0)).add_c(0.5);
    let gy = ry.mul_scalar_t(&scale_y.pow_c(-1.0)).add_c(0.5);
    (gx, gy)
}

/// Slope-based warp: displace sampling positions along the height gradient,
/// scaled by intensity. Gradients are central differences with wrap.
fn warp(intensity: &Tensor, img: &Tensor, height: &Tensor) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (gu, gv) = warp_grid(intensity, height, h, w);
    img.bilinear_wrap(&gu, &gv)
}

fn warp_grid(intensity: &Tensor, height: &Tensor, h: usize, w: usize) -> (Tensor, Tensor) {
    let tape = height.tape().clone();
    let (gx_f, gy_f) = central_gradients(height);
    let (u0, v0) = coord_grids(&tape, h, w);
    let gu = u0.add(&gx_f.reshape(&[h, w]).mul_scalar_t(intensity));
    let gv = v0.add(&gy_f.reshape(&[h, w]).mul_scalar_t(intensity));
    (gu, gv)
}

/// Sampling grids of a resampling filter at given normalized params, as
/// plain arrays; None for filters that do not resample.
fn sampling_grids(
    kind: FilterKind,
    params_norm: &[f64],
    inputs: &[ArrayD<f64>],
) -> Option<(ArrayD<f64>, ArrayD<f64>)> {
    if kind != FilterKind::Transform && kind != FilterKind::Warp {
        return None;
    }
    let tape = Tape::new();
    let defs = param_defs(kind);
    let pt = tape.constant(
        ArrayD::from_shape_vec(IxDyn(&[params_norm.len()]), params_norm.to_vec()).unwrap(),
    );
    let raw: Vec<Tensor> = defs
        .iter()
        .enumerate()
        .map(|(i, d)| pt.slice_c(i, 1).mul_c(d.hi - d.lo).add_c(d.lo))
        .collect();
    let (h, w) = (inputs[0].shape()[1], inputs[0].shape()[2]);
    let (gu, gv) = match kind {
        FilterKind::Transform => transform_grid(&raw, &tape, h, w),
        FilterKind::Warp => {
            let height = tape.constant(inputs[1].clone());
            warp_grid(&raw[0], &height, h, w)
        }
        _ => unreachable!(),
    };
    Some((gu.value().as_ref().clone(), gv.value().as_ref().clone()))
}

/// Map a grayscale mask through three color anchors with a tent basis:
/// out = c0·max(0,1-2g) + c1·(1-|2g-1|) + c2·max(0,2g-1).
fn colorize(raw: &[Tensor], gray: &Tensor) -> Tensor {
    let g2 = gray.mul_c(2.0);
    let w0 = g2.neg().add_c(1.0).max_c(0.0);
    let w1 = g2.add_c(-1.0).abs().neg().add_c(1.0);
    let w2 = g2.add_c(-1.0).max_c(0.0);
    let mut chans = Vec::with_capacity(3);
    for c in 0..3 {
        let (a0, a1, a2) = (&raw[c], &raw[3 + c], &raw[6 + c]);
        let ch = w0
            .mul_scalar_t(a0)
            .add(&w1.mul_scalar_t(a1))
            .add(&w2.mul_scalar_t(a2));
        chans.push(ch);
    }
    Tensor::concat_c(&[&chans[0], &chans[1], &chans[2]])
}

/// Height-to-normal: n = normalize(-i·dh/dx, -i·dh/dy, 1), encoded (n+1)/2.
fn normal_from_height(intensity: &Tensor, height: &Tensor) -> Tensor {
    let (gx, gy) = central_gradients(height);
    let nx = gx.mul_scalar_t(intensity).neg();
    let ny = gy.mul_scalar_t(intensity).neg();
    let len_inv = nx
        .sqr()
        .add(&ny.sqr())
        .add_c(1.0)
        .sqrt_t()
        .pow_c(-1.0);
    let ex = nx.mul(&len_inv).add_c(1.0).mul_c(0.5);
    let ey = ny.mul(&len_inv).add_c(1.0).mul_c(0.5);
    let ez = len_inv.add_c(1.0).mul_c(0.5);
    Tensor::concat_c(&[&ex, &ey, &ez])
}

/// Wrapped central differences of a [1,H,W] field, in per-texel units.
fn central_gradients(field: &Tensor) -> (Tensor, Tensor) {
    let tape = field.tape().clone();
    let kx = tape.constant(
        ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 3]), vec![-0.5, 0.0, 0.5]).unwrap(),
    );
    let ky = tape.constant(
        ArrayD::from_shape_vec(IxDyn(&[1, 1, 3, 1]), vec![-0.5, 0.0, 0.5]).unwrap(),
    );
    (
        field.conv2d(&kx, None, 1, PadMode::Circular),
        field.conv2d(&ky, None, 1, PadMode::Circular),
    )
}

/// Constant pixel-center coordinate grids in UV units, shape [H,W].
pub fn coord_grids(tape: &Tape, h: usize, w: usize) -> (Tensor, Tensor) {
    let mut u = ArrayD::zeros(IxDyn(&[h, w]));
    let mut v = ArrayD::zeros(IxDyn(&[h, w]));
    for y in 0..h {
        for x in 0..w {
            u[[y, x]] = (x as f64 + 0.5) / w as f64;
            v[[y, x]] = (y as f64 + 0.5) / h as f64;
        }
    }
    (tape.constant(u), tape.constant(v))
}

/// Gradient-check report for one filter configuration.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub kind: FilterKind,
    pub max_rel_err_params: f64,
    pub max_rel_err_inputs: f64,
    /// Output pixels excluded from the projection as kink-crossing.
    pub excluded_pixels: usize,
    pub total_pixels: usize,
}

/// Compare analytic gradients of a random-projection loss against central
/// differences (h = 1e-4) for both parameters and input pixels.
///
/// `params_norm` should sit strictly inside (0,1). Output pixels whose value
/// is locally non-smooth in some parameter (a resampling kink crossed within
/// the difference stencil, detected by an outsized second difference) are
/// excluded from the projection, implementing the "away from documented
/// non-smooth points" part of the contract; the exclusion is reported.
pub fn filter_gradcheck(
    kind: FilterKind,
    params_norm: &[f64],
    inputs: &[ArrayD<f64>],
    probe_seed: u64,
) -> Result<GradcheckReport> {
    use crate::util::rng::{splitmix64, unit_f64};
    let h = 1e-4;

    let forward = |pvals: &[f64], ivals: &[ArrayD<f64>]| -> Result<ArrayD<f64>> {
        let tape = Tape::new();
        let pt =
            tape.constant(ArrayD::from_shape_vec(IxDyn(&[pvals.len()]), pvals.to_vec()).unwrap());
        let its: Vec<Tensor> = ivals.iter().map(|a| tape.constant(a.clone())).collect();
        let irefs: Vec<&Tensor> = its.iter().collect();
        Ok(apply_filter(kind, &pt, &irefs)?.value().as_ref().clone())
    };

    let base = forward(params_norm, inputs)?;
    let n_out = base.len();
    let mut plus_outs = Vec::with_capacity(params_norm.len());
    let mut minus_outs = Vec::with_capacity(params_norm.len());
    for i in 0..params_norm.len() {
        let mut p = params_norm.to_vec();
        p[i] += h;
        plus_outs.push(forward(&p, inputs)?);
        let mut m = params_norm.to_vec();
        m[i] -= h;
        minus_outs.push(forward(&m, inputs)?);
    }

    // Random projection, zeroed on output pixels whose sampling position
    // crosses a texel boundary anywhere in the difference stencil (the
    // documented non-smooth set of the resampling filters).
    let mut weights: Vec<f64> = (0..n_out)
        .map(|i| unit_f64(splitmix64(probe_seed ^ (i as u64).wrapping_mul(0x9e37))) - 0.5)
        .collect();
    let mut excluded = 0usize;
    if let Some((gu0, gv0)) = sampling_grids(kind, params_norm, inputs) {
        let (hh, ww) = (inputs[0].shape()[1], inputs[0].shape()[2]);
        let plane = hh * ww;
        // texel cell of each base sample, plus a distance guard at the edges
        let eps = 1e-6;
        let cell_of = |gu: &ArrayD<f64>, gv: &ArrayD<f64>, p: usize| -> Option<(i64, i64)> {
            let pu = gu.as_slice().unwrap()[p] * ww as f64 - 0.5;
            let pv = gv.as_slice().unwrap()[p] * hh as f64 - 0.5;
            let (fu, fv) = (pu.floor(), pv.floor());
            if pu - fu < eps || pu - fu > 1.0 - eps || pv - fv < eps || pv - fv > 1.0 - eps {
                return None; // sitting on a boundary
            }
            Some((fu as i64, fv as i64))
        };
        let mut safe: Vec<Option<(i64, i64)>> =
            (0..plane).map(|p| cell_of(&gu0, &gv0, p)).collect();
        for i in 0..params_norm.len() {
            for sign in [1.0, -1.0] {
                let mut p = params_norm.to_vec();
                p[i] += sign * h;
                if let Some((gu, gv)) = sampling_grids(kind, &p, inputs) {
                    for (px, slot) in safe.iter_mut().enumerate() {
                        if let Some(cell) = *slot {
                            if cell_of(&gu, &gv, px) != Some(cell) {
                                *slot = None; // crossed into another texel
                            }
                        }
                    }
                }
            }
        }
        let chans = base.shape()[0];
        for (p, slot) in safe.iter().enumerate() {
            if slot.is_none() {
                for c in 0..chans {
                    weights[c * plane + p] = 0.0;
                }
                excluded += chans;
            }
        }
        assert!(
            excluded < n_out * 3 / 4,
            "kink mask excluded nearly all pixels; config unusable"
        );
    }

    let dot = |arr: &ArrayD<f64>| -> f64 {
        arr.as_slice()
            .unwrap()
            .iter()
            .zip(&weights)
            .map(|(a, w)| a * w)
            .sum()
    };

    // analytic gradients under the fixed projection
    let tape = Tape::new();
    let pt = tape.var(
        ArrayD::from_shape_vec(IxDyn(&[params_norm.len()]), params_norm.to_vec()).unwrap(),
    );
    let its: Vec<Tensor> = inputs.iter().map(|a| tape.var(a.clone())).collect();
    let irefs: Vec<&Tensor> = its.iter().collect();
    let out = apply_filter(kind, &pt, &irefs)?;
    let wt = tape.constant(ArrayD::from_shape_vec(IxDyn(out.shape()), weights.clone()).unwrap());
    let loss = out.mul(&wt).sum_all();
    let grads = tape.backward(&loss);
    let gp = grads.wrt_or_zeros(&pt);
    let gi: Vec<ArrayD<f64>> = its.iter().map(|t| grads.wrt_or_zeros(t)).collect();

    let mut max_p = 0.0f64;
    for i in 0..params_norm.len() {
        let num = (dot(&plus_outs[i]) - dot(&minus_outs[i])) / (2.0 * h);
        let ana = gp[[i]];
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
        max_p = max_p.max(rel);
    }

    // input-side probe (bilinear sampling is linear in pixel values, so no
    // kink handling is needed here)
    let mut max_i = 0.0f64;
    for (k, arr) in inputs.iter().enumerate() {
        let n = arr.len();
        for probe in 0..8u64 {
            let idx = (splitmix64(probe_seed ^ probe.wrapping_mul(0x51)) % n as u64) as usize;
            let mut plus = inputs.to_vec();
            plus[k].as_slice_mut().unwrap()[idx] += h;
            let mut minus = inputs.to_vec();
            minus[k].as_slice_mut().unwrap()[idx] -= h;
            let num = (dot(&forward(params_norm, &plus)?) - dot(&forward(params_norm, &minus)?))
                / (2.0 * h);
            let ana = gi[k].as_slice().unwrap()[idx];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
            max_i = max_i.max(rel);
        }
    }

    Ok(GradcheckReport {
        kind,
        max_rel_err_params: max_p,
        max_rel_err_inputs: max_i,
        excluded_pixels: excluded,
        total_pixels: n_out,
    })
}

/// Band-limited smooth test image, used by gradchecks to stay away from the
/// bilinear kink set.
pub fn smooth_test_image(c: usize, h: usize, w: usize, seed: u64) -> ArrayD<f64> {
    use crate::util::rng::{splitmix64, unit_f64};
    let mut arr: ArrayD<f64> = ArrayD::zeros(IxDyn(&[c, h, w]));
    for ci in 0..c {
        for m in 0..4u64 {
            let kx = 1.0 + (splitmix64(seed ^ (ci as u64) << 8 ^ m) % 3) as f64;
            let ky = 1.0 + (splitmix64(seed ^ (ci as u64) << 8 ^ (m + 7)) % 3) as f64;
            let phase = unit_f64(splitmix64(seed ^ m << 16 ^ ci as u64)) * std::f64::consts::TAU;
            let amp = 0.12;
            for y in 0..h {
                for x in 0..w {
                    let ang = std::f64::consts::TAU
                        * (kx * (x as f64 + 0.5) / w as f64 + ky * (y as f64 + 0.5) / h as f64);
                    arr[[ci, y, x]] += amp * (ang + phase).sin();
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                arr[[ci, y, x]] = 0.5 + arr[[ci, y, x]].clamp(-0.49, 0.49);
            }
        }
    }
    arr
}

#[cfg(test)]
#[path = "filters_tests.rs"]
mod tests;
