use super::*;
use crate::tensor::{Tape, Tensor};
use crate::util::rng::{splitmix64, unit_f64};
use ndarray::{ArrayD, IxDyn};

fn rng_img(c: usize, h: usize, w: usize, seed: u64) -> ArrayD<f64> {
    let n = c * h * w;
    let data: Vec<f64> = (0..n)
        .map(|i| unit_f64(splitmix64(seed ^ (i as u64).wrapping_mul(0x2545))))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&[c, h, w]), data).unwrap()
}

fn apply_arrays(kind: FilterKind, params_norm: &[f64], inputs: &[ArrayD<f64>]) -> ArrayD<f64> {
    let tape = Tape::new();
    let pt = tape.constant(
        ArrayD::from_shape_vec(IxDyn(&[params_norm.len()]), params_norm.to_vec()).unwrap(),
    );
    let its: Vec<Tensor> = inputs.iter().map(|a| tape.constant(a.clone())).collect();
    let irefs: Vec<&Tensor> = its.iter().collect();
    apply_filter(kind, &pt, &irefs).unwrap().value().as_ref().clone()
}

/// Gradcheck configuration per filter kind: normalized params strictly inside
/// (0,1) and away from documented non-smooth points, plus smooth inputs.
pub(crate) fn gradcheck_config(
    kind: FilterKind,
    h: usize,
    w: usize,
    seed: u64,
) -> (Vec<f64>, Vec<ArrayD<f64>>) {
    let defs = param_defs(kind);
    let mut params: Vec<f64> = (0..defs.len())
        .map(|i| 0.2 + 0.6 * unit_f64(splitmix64(seed ^ (i as u64) << 24)))
        .collect();
    if kind == FilterKind::Levels {
        // keep the input window wide open so the clamp kinks stay inactive
        params[0] = 0.02 * unit_f64(splitmix64(seed ^ 0xaa));
        params[1] = 1.0 - 0.02 * unit_f64(splitmix64(seed ^ 0xbb));
    }
    let inputs = match kind {
        FilterKind::Blend => vec![
            smooth_test_image(3, h, w, seed),
            smooth_test_image(3, h, w, seed ^ 0x77),
        ],
        FilterKind::Hsl => vec![smooth_test_image(3, h, w, seed)],
        FilterKind::Warp => vec![
            smooth_test_image(3, h, w, seed),
            smooth_test_image(1, h, w, seed ^ 0x99),
        ],
        FilterKind::Colorize | FilterKind::NormalFromHeight => {
            // keep gray strictly below 0.5 so the tent-basis knot is avoided
            let mut g = smooth_test_image(1, h, w, seed);
            g.mapv_inplace(|v| 0.05 + 0.38 * v);
            vec![g]
        }
        _ => vec![smooth_test_image(1, h, w, seed)],
    };
    (params, inputs)
}

#[test]
fn blend_endpoints_are_exact() {
    let fg = rng_img(3, 8, 8, 1);
    let bg = rng_img(3, 8, 8, 2);
    let out0 = apply_arrays(FilterKind::Blend, &[0.0], &[fg.clone(), bg.clone()]);
    for (a, b) in out0.iter().zip(bg.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    let out1 = apply_arrays(FilterKind::Blend, &[1.0], &[fg.clone(), bg.clone()]);
    for (a, b) in out1.iter().zip(fg.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn blend_opacity_gradient_is_mean_difference() {
    // closed form: d mean(out) / d opacity = mean(fg - bg)
    let fg = rng_img(1, 8, 8, 3);
    let bg = rng_img(1, 8, 8, 4);
    let tape = Tape::new();
    let pt = tape.var(ArrayD::from_elem(IxDyn(&[1]), 0.37));
    let ft = tape.constant(fg.clone());
    let bt = tape.constant(bg.clone());
    let out = apply_filter(FilterKind::Blend, &pt, &[&ft, &bt]).unwrap();
    let loss = out.mean_all();
    let grads = tape.backward(&loss);
    let g = grads.wrt_or_zeros(&pt)[[0]];
    let expect: f64 =
        fg.iter().zip(bg.iter()).map(|(a, b)| a - b).sum::<f64>() / fg.len() as f64;
    assert!((g - expect).abs() < 1e-12, "{g} vs {expect}");
}

#[test]
fn levels_identity_leaves_input_unchanged() {
    let x = rng_img(1, 8, 8, 5);
    let params = normalize_values(FilterKind::Levels, &[0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
    let out = apply_arrays(FilterKind::Levels, &params, &[x.clone()]);
    for (a, b) in out.iter().zip(x.iter()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn blur_impulse_reproduces_periodic_kernel() {
    let (h, w) = (32usize, 32usize);
    let mut impulse = ArrayD::zeros(IxDyn(&[1, h, w]));
    impulse[[0, 8, 11]] = 1.0;
    let sigma = 2.0f64;
    let params = normalize_values(FilterKind::Blur, &[sigma]).unwrap();
    let out = apply_arrays(FilterKind::Blur, &params, &[impulse]);

    // explicit wrapped separable kernel
    let r = 24i64;
    let mut k1 = vec![0.0f64; (2 * r + 1) as usize];
    let mut z = 0.0;
    for d in -r..=r {
        let v = (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
        k1[(d + r) as usize] = v;
        z += v;
    }
    for v in &mut k1 {
        *v /= z;
    }
    let wrapped = |n: usize, delta: i64| -> f64 {
        let mut s = 0.0;
        for d in -r..=r {
            if (d - delta).rem_euclid(n as i64) == 0 {
                s += k1[(d + r) as usize];
            }
        }
        s
    };
    let total: f64 = out.iter().sum();
    assert!((total - 1.0).abs() < 1e-6, "kernel mass {total}");
    for y in 0..h {
        for x in 0..w {
            let dy = y as i64 - 8;
            let dx = x as i64 - 11;
            let expect = wrapped(h, dy) * wrapped(w, dx);
            assert!(
                (out[[0, y, x]] - expect).abs() < 1e-9,
                "({y},{x}): {} vs {expect}",
                out[[0, y, x]]
            );
        }
    }
}

#[test]
fn blur_sigma_zero_is_identity() {
    let x = rng_img(2, 16, 16, 6);
    let params = normalize_values(FilterKind::Blur, &[0.0]).unwrap();
    let out = apply_arrays(FilterKind::Blur, &params, &[x.clone()]);
    for (a, b) in out.iter().zip(x.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn transform_quarter_offset_is_circular_shift() {
    let x = rng_img(3, 16, 32, 7);
    let raw = vec![1.0, 1.0, 0.0, 0.25, 0.0];
    let params = normalize_values(FilterKind::Transform, &raw).unwrap();
    let out = apply_arrays(FilterKind::Transform, &params, &[x.clone()]);
    // explicit roll by W/4 = 8 pixels
    for c in 0..3 {
        for y in 0..16 {
            for px in 0..32 {
                let expect = x[[c, y, (px + 32 - 8) % 32]];
                assert_eq!(out[[c, y, px]].to_bits(), expect.to_bits(), "({c},{y},{px})");
            }
        }
    }
}

#[test]
fn shift_equivariant_filters_commute_with_wrap_shift() {
    // filter(shift(x)) == shift(filter(x)), exactly
    let kinds = [
        FilterKind::Blend,
        FilterKind::Levels,
        FilterKind::Hsl,
        FilterKind::Blur,
        FilterKind::Colorize,
        FilterKind::NormalFromHeight,
    ];
    let (h, w) = (16usize, 16usize);
    let (dy, dx) = (5usize, 9usize);
    let roll = |a: &ArrayD<f64>| -> ArrayD<f64> {
        let mut out = a.clone();
        let c = a.shape()[0];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[ci, y, x]] = a[[ci, (y + h - dy) % h, (x + w - dx) % w]];
                }
            }
        }
        out
    };
    for kind in kinds {
        let defs = param_defs(kind);
        let params: Vec<f64> = (0..defs.len())
            .map(|i| 0.25 + 0.5 * unit_f64(splitmix64(77 ^ (i as u64) << 8)))
            .collect();
        let inputs: Vec<ArrayD<f64>> = match arity(kind) {
            2 => vec![rng_img(ch_for(kind), h, w, 8), rng_img(ch_for(kind), h, w, 9)],
            _ => vec![rng_img(ch_for(kind), h, w, 8)],
        };
        let out = apply_arrays(kind, &params, &inputs);
        let shifted_inputs: Vec<ArrayD<f64>> = inputs.iter().map(&roll).collect();
        let out_shifted = apply_arrays(kind, &params, &shifted_inputs);
        let rolled = roll(&out);
        for (a, b) in out_shifted.iter().zip(rolled.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "{kind:?} breaks tileability");
        }
    }
}

fn ch_for(kind: FilterKind) -> usize {
    match kind {
        FilterKind::Hsl => 3,
        FilterKind::Colorize | FilterKind::NormalFromHeight => 1,
        _ => 1,
    }
}

#[test]
fn range_preserving_filters_stay_in_unit_interval() {
    let kinds = [
        FilterKind::Blend,
        FilterKind::Levels,
        FilterKind::Hsl,
        FilterKind::Blur,
        FilterKind::Colorize,
        FilterKind::Transform,
        FilterKind::Warp,
        FilterKind::NormalFromHeight,
    ];
    for kind in kinds {
        for s in 0..5u64 {
            let defs = param_defs(kind);
            let params: Vec<f64> = (0..defs.len())
                .map(|i| unit_f64(splitmix64(s ^ (i as u64) << 40 ^ 0xfeed)))
                .collect();
            let inputs: Vec<ArrayD<f64>> = (0..arity(kind))
                .map(|k| {
                    let c = if k == 1 { 1 } else { ch_for(kind) };
                    rng_img(c, 8, 8, s * 10 + k as u64)
                })
                .collect();
            let out = apply_arrays(kind, &params, &inputs);
            for &v in out.iter() {
                assert!(
                    (0.0..=1.0).contains(&v) && v.is_finite(),
                    "{kind:?} produced {v}"
                );
            }
        }
    }
}

#[test]
fn gradcheck_all_filters() {
    for kind in FILTER_KINDS {
        for seed in 0..3u64 {
            let (params, inputs) = gradcheck_config(kind, 16, 16, 1000 + seed);
            let report = filter_gradcheck(kind, &params, &inputs, seed).unwrap();
            assert!(
                report.max_rel_err_params <= 1e-3,
                "{kind:?} params rel err {}",
                report.max_rel_err_params
            );
            assert!(
                report.max_rel_err_inputs <= 1e-3,
                "{kind:?} inputs rel err {}",
                report.max_rel_err_inputs
            );
        }
    }
    // the smooth interior point gamma = 1 is part of the suite
    let gamma_one = normalize_values(FilterKind::Levels, &[0.02, 0.98, 1.0, 0.1, 0.9]).unwrap();
    let (_, inputs) = gradcheck_config(FilterKind::Levels, 16, 16, 4242);
    let report = filter_gradcheck(FilterKind::Levels, &gamma_one, &inputs, 7).unwrap();
    assert!(report.max_rel_err_params <= 1e-3);
}

#[test]
fn invalid_arity_and_channels_rejected() {
    let x = rng_img(1, 8, 8, 1);
    let tape = Tape::new();
    let pt = tape.constant(ArrayD::from_elem(IxDyn(&[1]), 0.5));
    let xt = tape.constant(x);
    // blend with one input
    assert!(apply_filter(FilterKind::Blend, &pt, &[&xt]).is_err());
    // hsl needs 3 channels
    let p3 = tape.constant(ArrayD::from_elem(IxDyn(&[3]), 0.5));
    assert!(apply_filter(FilterKind::Hsl, &p3, &[&xt]).is_err());
    // out-of-range raw params rejected by normalize_values
    assert!(normalize_values(FilterKind::Blend, &[1.5]).is_err());
}

#[test]
fn registry_enumerates_all_kinds() {
    let reg = registry_json();
    let filters = reg["filters"].as_array().unwrap();
    assert_eq!(filters.len(), FILTER_KINDS.len());
    for f in filters {
        assert!(f["arity"].as_u64().unwrap() >= 1);
        assert!(!f["params"].as_array().unwrap().is_empty());
    }
    // normalized round trip through the registry ranges
    for kind in FILTER_KINDS {
        let defaults = default_normalized(kind);
        let raw = denormalize_values(kind, &defaults).unwrap();
        let back = normalize_values(kind, &raw).unwrap();
        for (a, b) in defaults.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
