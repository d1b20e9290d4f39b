//! Finite-difference checks for every tape operation.

use super::conv::PadMode;
use super::*;
use ndarray::{ArrayD, IxDyn};

use crate::util::rng::{splitmix64, unit_f64};

fn rng_array(shape: &[usize], seed: u64, lo: f64, hi: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * unit_f64(splitmix64(seed ^ (i as u64).wrapping_mul(0x9e37))))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Central-difference gradient check on one leaf of a scalar-valued builder.
/// `build` maps leaf values to a loss; re-invoked per perturbed evaluation.
fn gradcheck(
    leaves: &[ArrayD<f64>],
    check: usize,
    h: f64,
    tol: f64,
    build: impl Fn(&Tape, &[Tensor]) -> Tensor,
) {
    let make = |vals: &[ArrayD<f64>]| -> f64 {
        let tape = Tape::new();
        let ts: Vec<Tensor> = vals.iter().map(|v| tape.var(v.clone())).collect();
        build(&tape, &ts).scalar_value()
    };
    // analytic
    let tape = Tape::new();
    let ts: Vec<Tensor> = leaves.iter().map(|v| tape.var(v.clone())).collect();
    let loss = build(&tape, &ts);
    let grads = tape.backward(&loss);
    let analytic = grads.wrt_or_zeros(&ts[check]);

    let mut worst = 0.0f64;
    let n = leaves[check].len();
    for i in 0..n {
        let mut plus = leaves.to_vec();
        plus[check].as_slice_mut().unwrap()[i] += h;
        let mut minus = leaves.to_vec();
        minus[check].as_slice_mut().unwrap()[i] -= h;
        let num = (make(&plus) - make(&minus)) / (2.0 * h);
        let ana = analytic.as_slice().unwrap()[i];
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
        worst = worst.max(rel);
        assert!(
            rel <= tol,
            "gradcheck failed at leaf {check} coord {i}: analytic {ana} vs numeric {num} (rel {rel:.3e})"
        );
    }
    let _ = worst;
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let a = rng_array(&[3, 4], 1, -0.8, 0.9);
    let b = rng_array(&[3, 4], 2, 0.2, 1.2);
    for leaf in 0..2 {
        gradcheck(&[a.clone(), b.clone()], leaf, 1e-5, 1e-6, |_t, ts| {
            let x = ts[0].add(&ts[1]).mul(&ts[0]).sub(&ts[1].sqr());
            let y = x.div(&ts[1]).sigmoid().mul_c(3.0).add_c(0.1);
            y.mean_all()
        });
    }
}

#[test]
fn unary_ops_match_finite_differences() {
    let a = rng_array(&[2, 5], 3, 0.3, 1.4);
    gradcheck(&[a], 0, 1e-5, 1e-6, |_t, ts| {
        let x = ts[0]
            .sqrt_t()
            .exp_t()
            .ln_t()
            .sin_t()
            .add(&ts[0].cos_t())
            .softplus()
            .leaky_relu(0.2);
        x.sum_all()
    });
    let b = rng_array(&[7], 4, -1.0, 1.0);
    gradcheck(&[b], 0, 1e-5, 1e-5, |_t, ts| {
        // abs/neg/min/max away from their kinks
        ts[0].abs().neg().min_c(0.9).max_c(-0.9).sqr().sum_all()
    });
}

#[test]
fn pow_ops_match_finite_differences() {
    let a = rng_array(&[6], 5, 0.2, 1.8);
    gradcheck(&[a.clone()], 0, 1e-6, 1e-6, |_t, ts| {
        ts[0].pow_c(2.7).mean_all()
    });
    let e = ArrayD::from_elem(IxDyn(&[1]), 1.7);
    gradcheck(&[a, e], 0, 1e-6, 1e-6, |_t, ts| {
        ts[0].pow_ts(&ts[1]).mean_all()
    });
    let a2 = rng_array(&[6], 6, 0.2, 1.8);
    let e2 = ArrayD::from_elem(IxDyn(&[1]), 0.6);
    gradcheck(&[a2, e2], 1, 1e-6, 1e-6, |_t, ts| {
        ts[0].pow_ts(&ts[1]).mean_all()
    });
}

#[test]
fn scalar_broadcast_ops_match_finite_differences() {
    let a = rng_array(&[3, 3], 7, -1.0, 1.0);
    let s = ArrayD::from_elem(IxDyn(&[1]), 0.37);
    for leaf in 0..2 {
        gradcheck(&[a.clone(), s.clone()], leaf, 1e-6, 1e-6, |_t, ts| {
            ts[0].mul_scalar_t(&ts[1]).add_scalar_t(&ts[1]).sqr().sum_all()
        });
    }
}

#[test]
fn reduction_and_shape_ops_match_finite_differences() {
    let a = rng_array(&[2, 3, 4], 8, -1.0, 1.0);
    gradcheck(&[a.clone()], 0, 1e-6, 1e-6, |_t, ts| {
        let s = ts[0].sum_but_axis(1); // [3]
        s.sqr().sum_all()
    });
    gradcheck(&[a.clone()], 0, 1e-6, 1e-6, |_t, ts| {
        let r = ts[0].reshape(&[6, 4]);
        let sl = r.slice_c(1, 3);
        sl.mean_all()
    });
    let b = rng_array(&[1, 3, 4], 9, -1.0, 1.0);
    for leaf in 0..2 {
        gradcheck(&[a.clone(), b.clone()], leaf, 1e-6, 1e-6, |_t, ts| {
            Tensor::concat_c(&[&ts[0], &ts[1]]).sqr().mean_all()
        });
    }
}

#[test]
fn broadcast_multiplies_match_finite_differences() {
    let a = rng_array(&[3, 2, 4], 10, -1.0, 1.0);
    let v = rng_array(&[2], 11, 0.5, 1.5);
    for leaf in 0..2 {
        gradcheck(&[a.clone(), v.clone()], leaf, 1e-6, 1e-6, |_t, ts| {
            ts[0].mul_axis(&ts[1], 1).sqr().mean_all()
        });
    }
    let s = rng_array(&[1, 2, 4], 12, 0.1, 1.0);
    for leaf in 0..2 {
        gradcheck(&[a.clone(), s.clone()], leaf, 1e-6, 1e-6, |_t, ts| {
            ts[0].mul_bcast_c(&ts[1]).exp_t().mean_all()
        });
    }
}

#[test]
fn matmul_and_linear_match_finite_differences() {
    let a = rng_array(&[3, 4], 13, -1.0, 1.0);
    let b = rng_array(&[4, 2], 14, -1.0, 1.0);
    for leaf in 0..2 {
        gradcheck(&[a.clone(), b.clone()], leaf, 1e-6, 1e-6, |_t, ts| {
            ts[0].matmul(&ts[1]).sqr().sum_all()
        });
    }
    let bt = rng_array(&[2, 4], 15, -1.0, 1.0);
    for leaf in 0..2 {
        gradcheck(&[a.clone(), bt.clone()], leaf, 1e-6, 1e-6, |_t, ts| {
            ts[0].matmul_nt(&ts[1]).abs().sum_all()
        });
    }
    let x = rng_array(&[4], 16, -1.0, 1.0);
    let w = rng_array(&[3, 4], 17, -1.0, 1.0);
    let bias = rng_array(&[3], 18, -0.1, 0.1);
    for leaf in 0..3 {
        gradcheck(&[x.clone(), w.clone(), bias.clone()], leaf, 1e-6, 1e-6, |_t, ts| {
            ts[0].linear(&ts[1], &ts[2]).sigmoid().sum_all()
        });
    }
}

#[test]
fn conv2d_matches_finite_differences() {
    for (stride, pad) in [
        (1, PadMode::Circular),
        (1, PadMode::Zero),
        (2, PadMode::Circular),
        (2, PadMode::Zero),
    ] {
        let x = rng_array(&[2, 4, 6], 19, -1.0, 1.0);
        let w = rng_array(&[3, 2, 3, 3], 20, -0.5, 0.5);
        let b = rng_array(&[3], 21, -0.1, 0.1);
        for leaf in 0..3 {
            let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
            gradcheck(&[xc, wc, bc], leaf, 1e-6, 1e-5, move |_t, ts| {
                ts[0].conv2d(&ts[1], Some(&ts[2]), stride, pad).sqr().sum_all()
            });
        }
    }
}

#[test]
fn conv2d_circular_identity_kernel_is_exact() {
    // 1x1 identity kernel must reproduce the input bitwise.
    let x = rng_array(&[1, 4, 4], 22, 0.0, 1.0);
    let tape = Tape::new();
    let xt = tape.var(x.clone());
    let w = tape.var(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0));
    let y = xt.conv2d(&w, None, 1, PadMode::Circular);
    assert_eq!(*y.value(), x);
}

#[test]
fn pooling_and_upsampling_match_finite_differences() {
    let x = rng_array(&[2, 4, 4], 23, -1.0, 1.0);
    gradcheck(&[x.clone()], 0, 1e-6, 1e-6, |_t, ts| {
        ts[0].avg_pool2(2).sqr().sum_all()
    });
    gradcheck(&[x], 0, 1e-6, 1e-6, |_t, ts| {
        ts[0].upsample2().sqr().mean_all()
    });
}

#[test]
fn bilinear_wrap_matches_finite_differences() {
    let img = rng_array(&[2, 5, 6], 24, 0.0, 1.0);
    // keep grid coords away from integer texel centers so fx/fy stay smooth
    let gu = rng_array(&[3, 3], 25, 0.12, 0.93);
    let gv = rng_array(&[3, 3], 26, 0.07, 0.88);
    for leaf in 0..3 {
        gradcheck(
            &[img.clone(), gu.clone(), gv.clone()],
            leaf,
            1e-6,
            1e-5,
            |_t, ts| ts[0].bilinear_wrap(&ts[1], &ts[2]).sqr().sum_all(),
        );
    }
}

#[test]
fn bilinear_wrap_at_texel_centers_is_identity() {
    let img = rng_array(&[1, 4, 4], 27, 0.0, 1.0);
    let tape = Tape::new();
    let it = tape.constant(img.clone());
    let mut guv = ArrayD::zeros(IxDyn(&[4, 4]));
    let mut gvv = ArrayD::zeros(IxDyn(&[4, 4]));
    for y in 0..4 {
        for x in 0..4 {
            guv[[y, x]] = (x as f64 + 0.5) / 4.0;
            gvv[[y, x]] = (y as f64 + 0.5) / 4.0;
        }
    }
    let out = it.bilinear_wrap(&tape.constant(guv), &tape.constant(gvv));
    for (a, b) in out.value().iter().zip(img.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn backward_is_deterministic() {
    let x = rng_array(&[2, 8, 8], 28, -1.0, 1.0);
    let w = rng_array(&[3, 2, 3, 3], 29, -0.5, 0.5);
    let run = || {
        let tape = Tape::new();
        let xt = tape.var(x.clone());
        let wt = tape.var(w.clone());
        let loss = xt
            .conv2d(&wt, None, 1, PadMode::Circular)
            .leaky_relu(0.2)
            .avg_pool2(2)
            .sqr()
            .mean_all();
        let grads = tape.backward(&loss);
        (loss.scalar_value(), grads.wrt_or_zeros(&wt))
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    for (a, b) in g1.iter().zip(g2.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(rng_array(&[3], 30, 0.0, 1.0));
    let v = tape.var(rng_array(&[3], 31, 0.0, 1.0));
    let loss = c.mul(&v).sum_all();
    let grads = tape.backward(&loss);
    assert!(grads.wrt(&c).is_none());
    assert!(grads.wrt(&v).is_some());
}
