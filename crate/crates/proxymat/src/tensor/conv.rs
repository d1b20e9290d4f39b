//! Convolution, pooling, resampling, and GEMM kernels behind the tape ops.
//!
//! Convolutions go through im2col + GEMM (`ndarray::linalg::general_mat_mul`,
//! single-threaded and order-deterministic). The column matrix is recomputed
//! in the backward pass instead of being cached, trading a cheap gather for a
//! large per-node allocation.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, Ix1, Ix2, Ix3, Ix4, IxDyn};

/// Boundary handling for convolutions: wrap around the torus, or zero-pad.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Circular,
    Zero,
}

// ---------------------------------------------------------------------------
// GEMM helpers
// ---------------------------------------------------------------------------

pub(crate) fn matmul_forward(a: &ArrayD<f64>, b: &ArrayD<f64>, nt: bool) -> ArrayD<f64> {
    let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs 2d");
    let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs 2d");
    let out = if nt {
        assert_eq!(a2.ncols(), b2.ncols(), "matmul_nt inner dims");
        let mut c = Array2::zeros((a2.nrows(), b2.nrows()));
        ndarray::linalg::general_mat_mul(1.0, &a2, &b2.t(), 0.0, &mut c);
        c
    } else {
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dims");
        let mut c = Array2::zeros((a2.nrows(), b2.ncols()));
        ndarray::linalg::general_mat_mul(1.0, &a2, &b2, 0.0, &mut c);
        c
    };
    out.into_dyn()
}

pub(crate) fn matmul_backward(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    g: &ArrayD<f64>,
    nt: bool,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
    let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
    if nt {
        // c = a·bᵀ: ga = g·b, gb = gᵀ·a
        let mut ga = Array2::zeros(a2.raw_dim());
        ndarray::linalg::general_mat_mul(1.0, &g2, &b2, 0.0, &mut ga);
        let mut gb = Array2::zeros(b2.raw_dim());
        ndarray::linalg::general_mat_mul(1.0, &g2.t(), &a2, 0.0, &mut gb);
        (ga.into_dyn(), gb.into_dyn())
    } else {
        // c = a·b: ga = g·bᵀ, gb = aᵀ·g
        let mut ga = Array2::zeros(a2.raw_dim());
        ndarray::linalg::general_mat_mul(1.0, &g2, &b2.t(), 0.0, &mut ga);
        let mut gb = Array2::zeros(b2.raw_dim());
        ndarray::linalg::general_mat_mul(1.0, &a2.t(), &g2, 0.0, &mut gb);
        (ga.into_dyn(), gb.into_dyn())
    }
}

pub(crate) fn linear_forward(x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let x1 = x.view().into_dimensionality::<Ix1>().expect("linear x 1d");
    let w2 = w.view().into_dimensionality::<Ix2>().expect("linear w 2d");
    let b1 = b.view().into_dimensionality::<Ix1>().expect("linear b 1d");
    assert_eq!(w2.ncols(), x1.len(), "linear dims");
    assert_eq!(w2.nrows(), b1.len(), "linear bias dims");
    let mut out = b1.to_owned();
    ndarray::linalg::general_mat_vec_mul(1.0, &w2, &x1, 1.0, &mut out);
    out.into_dyn()
}

pub(crate) fn linear_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    g: &ArrayD<f64>,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let x1 = x.view().into_dimensionality::<Ix1>().unwrap();
    let w2 = w.view().into_dimensionality::<Ix2>().unwrap();
    let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
    let mut gx = Array1::zeros(x1.len());
    ndarray::linalg::general_mat_vec_mul(1.0, &w2.t(), &g1, 0.0, &mut gx);
    let mut gw = Array2::zeros(w2.raw_dim());
    for (i, gi) in g1.iter().enumerate() {
        if *gi != 0.0 {
            let mut row = gw.row_mut(i);
            row.zip_mut_with(&x1, |o, &xv| *o += gi * xv);
        }
    }
    (gx.into_dyn(), gw.into_dyn(), g1.to_owned().into_dyn())
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvDims {
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize) -> ConvDims {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 3, "conv input must be [C,H,W]");
    assert_eq!(ws.len(), 4, "conv weight must be [Cout,Cin,kh,kw]");
    assert_eq!(xs[0], ws[1], "conv channel mismatch");
    assert!(stride == 1 || stride == 2, "conv stride must be 1 or 2");
    assert_eq!(xs[1] % stride, 0, "conv height not divisible by stride");
    assert_eq!(xs[2] % stride, 0, "conv width not divisible by stride");
    ConvDims {
        cin: xs[0],
        cout: ws[0],
        kh: ws[2],
        kw: ws[3],
        h: xs[1],
        w: xs[2],
        ho: xs[1] / stride,
        wo: xs[2] / stride,
    }
}

/// Source index map for output position `o`, kernel offset `d`:
/// `o*stride + d - pad`, wrapped (circular) or usize::MAX (zero pad, skip).
fn index_map(n_out: usize, n_in: usize, k: usize, stride: usize, pad_mode: PadMode) -> Vec<Vec<usize>> {
    let pad = (k - 1) / 2;
    (0..k)
        .map(|d| {
            (0..n_out)
                .map(|o| {
                    let idx = (o * stride + d) as isize - pad as isize;
                    match pad_mode {
                        PadMode::Circular => idx.rem_euclid(n_in as isize) as usize,
                        PadMode::Zero => {
                            if idx < 0 || idx >= n_in as isize {
                                usize::MAX
                            } else {
                                idx as usize
                            }
                        }
                    }
                })
                .collect()
        })
        .collect()
}

fn im2col(x: &ArrayView2<'_, f64>, dims: &ConvDims, cin_stride: usize, stride: usize, pad: PadMode) -> Array2<f64> {
    // x here is the flattened [cin, h*w] view.
    let ConvDims { cin, kh, kw, w, ho, wo, .. } = *dims;
    let ymap = index_map(ho, dims.h, kh, stride, pad);
    let xmap = index_map(wo, w, kw, stride, pad);
    let mut col = Array2::zeros((cin * kh * kw, ho * wo));
    let xs = x.as_slice().expect("im2col input layout");
    let pad_amount = ((kw - 1) / 2) as isize;
    for ci in 0..cin {
        let base = ci * cin_stride;
        for di in 0..kh {
            for dj in 0..kw {
                let row = (ci * kh + di) * kw + dj;
                let mut out_row = col.row_mut(row);
                let or = out_row.as_slice_mut().unwrap();
                for oy in 0..ho {
                    let sy = ymap[di][oy];
                    if sy == usize::MAX {
                        continue;
                    }
                    let src = base + sy * w;
                    let dst = oy * wo;
                    if stride == 1 {
                        // source index = (ox + dj - pad) wrapped/clipped:
                        // contiguous runs, copied as slices
                        let shift = dj as isize - pad_amount;
                        match pad {
                            PadMode::Circular => {
                                let s = shift.rem_euclid(w as isize) as usize;
                                let first = w - s;
                                or[dst..dst + first].copy_from_slice(&xs[src + s..src + w]);
                                or[dst + first..dst + w].copy_from_slice(&xs[src..src + s]);
                            }
                            PadMode::Zero => {
                                if shift >= 0 {
                                    let s = shift as usize;
                                    or[dst..dst + w - s]
                                        .copy_from_slice(&xs[src + s..src + w]);
                                } else {
                                    let s = (-shift) as usize;
                                    or[dst + s..dst + w]
                                        .copy_from_slice(&xs[src..src + w - s]);
                                }
                            }
                        }
                    } else {
                        let xm = &xmap[dj];
                        for ox in 0..wo {
                            let sx = xm[ox];
                            if sx != usize::MAX {
                                or[dst + ox] = xs[src + sx];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

pub(crate) fn conv2d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: Option<&ArrayD<f64>>,
    stride: usize,
    pad: PadMode,
) -> ArrayD<f64> {
    let dims = conv_dims(x, w, stride);
    let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
    let xflat = x3
        .to_shape((dims.cin, dims.h * dims.w))
        .expect("conv reshape");
    let col = im2col(&xflat.view(), &dims, dims.h * dims.w, stride, pad);
    let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
    let wmat = w4
        .to_shape((dims.cout, dims.cin * dims.kh * dims.kw))
        .expect("conv weight reshape");
    let mut out = Array2::zeros((dims.cout, dims.ho * dims.wo));
    ndarray::linalg::general_mat_mul(1.0, &wmat.view(), &col.view(), 0.0, &mut out);
    if let Some(bias) = b {
        let b1 = bias.view().into_dimensionality::<Ix1>().unwrap();
        for (mut row, &bv) in out.rows_mut().into_iter().zip(b1.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
    }
    out.into_shape_with_order((dims.cout, dims.ho, dims.wo))
        .unwrap()
        .into_dyn()
}

pub(crate) fn conv2d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    g: &ArrayD<f64>,
    stride: usize,
    pad: PadMode,
    need_x: bool,
    need_w: bool,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let dims = conv_dims(x, w, stride);
    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
    let gmat = g3
        .to_shape((dims.cout, dims.ho * dims.wo))
        .expect("conv grad reshape");
    let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
    let wmat = w4
        .to_shape((dims.cout, dims.cin * dims.kh * dims.kw))
        .unwrap();

    let mut gx = ArrayD::zeros(IxDyn(&[dims.cin, dims.h, dims.w]));
    let mut gw = ArrayD::zeros(IxDyn(&[dims.cout, dims.cin, dims.kh, dims.kw]));

    if need_w {
        let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
        let xflat = x3.to_shape((dims.cin, dims.h * dims.w)).unwrap();
        let col = im2col(&xflat.view(), &dims, dims.h * dims.w, stride, pad);
        let mut gwmat = Array2::zeros((dims.cout, dims.cin * dims.kh * dims.kw));
        ndarray::linalg::general_mat_mul(1.0, &gmat.view(), &col.t(), 0.0, &mut gwmat);
        gw = gwmat
            .into_shape_with_order((dims.cout, dims.cin, dims.kh, dims.kw))
            .unwrap()
            .into_dyn();
    }

    if need_x {
        // gcol = wᵀ·g, then scatter back (col2im).
        let mut gcol = Array2::zeros((dims.cin * dims.kh * dims.kw, dims.ho * dims.wo));
        ndarray::linalg::general_mat_mul(1.0, &wmat.t(), &gmat.view(), 0.0, &mut gcol);
        let ymap = index_map(dims.ho, dims.h, dims.kh, stride, pad);
        let xmap = index_map(dims.wo, dims.w, dims.kw, stride, pad);
        let gxs = gx.as_slice_mut().unwrap();
        let plane = dims.h * dims.w;
        let pad_amount = ((dims.kw - 1) / 2) as isize;
        let add = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        };
        for ci in 0..dims.cin {
            for di in 0..dims.kh {
                for dj in 0..dims.kw {
                    let row = (ci * dims.kh + di) * dims.kw + dj;
                    let grow = gcol.row(row);
                    let gr = grow.as_slice().unwrap();
                    for oy in 0..dims.ho {
                        let sy = ymap[di][oy];
                        if sy == usize::MAX {
                            continue;
                        }
                        let dst = ci * plane + sy * dims.w;
                        let src = oy * dims.wo;
                        if stride == 1 {
                            let shift = dj as isize - pad_amount;
                            match pad {
                                PadMode::Circular => {
                                    let s = shift.rem_euclid(dims.w as isize) as usize;
                                    let first = dims.w - s;
                                    add(
                                        &mut gxs[dst + s..dst + dims.w],
                                        &gr[src..src + first],
                                    );
                                    add(&mut gxs[dst..dst + s], &gr[src + first..src + dims.w]);
                                }
                                PadMode::Zero => {
                                    if shift >= 0 {
                                        let s = shift as usize;
                                        add(
                                            &mut gxs[dst + s..dst + dims.w],
                                            &gr[src..src + dims.w - s],
                                        );
                                    } else {
                                        let s = (-shift) as usize;
                                        add(
                                            &mut gxs[dst..dst + dims.w - s],
                                            &gr[src + s..src + dims.w],
                                        );
                                    }
                                }
                            }
                        } else {
                            let xm = &xmap[dj];
                            for ox in 0..dims.wo {
                                let sx = xm[ox];
                                if sx != usize::MAX {
                                    gxs[dst + sx] += gr[src + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    (gx, gw)
}

pub(crate) fn conv2d_bias_grad(g: &ArrayD<f64>) -> ArrayD<f64> {
    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
    let cout = g3.shape()[0];
    let mut gb = Array1::zeros(cout);
    for (c, plane) in g3.outer_iter().enumerate() {
        gb[c] = plane.sum();
    }
    gb.into_dyn()
}

// ---------------------------------------------------------------------------
// Pooling / resampling
// ---------------------------------------------------------------------------

pub(crate) fn avg_pool_forward(x: &ArrayD<f64>, k: usize) -> ArrayD<f64> {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("pool [C,H,W]");
    let (c, h, w) = x3.dim();
    assert!(h % k == 0 && w % k == 0, "pool size must divide dims");
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = Array3::zeros((c, ho, wo));
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        s += x3[[ci, oy * k + dy, ox * k + dx]];
                    }
                }
                out[[ci, oy, ox]] = s * inv;
            }
        }
    }
    out.into_dyn()
}

pub(crate) fn avg_pool_backward(xshape: &[usize], g: &ArrayD<f64>, k: usize) -> ArrayD<f64> {
    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
    let (c, ho, wo) = g3.dim();
    let inv = 1.0 / (k * k) as f64;
    let mut gx = Array3::zeros((xshape[0], xshape[1], xshape[2]));
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = g3[[ci, oy, ox]] * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        gx[[ci, oy * k + dy, ox * k + dx]] = gv;
                    }
                }
            }
        }
    }
    gx.into_dyn()
}

pub(crate) fn upsample2_forward(x: &ArrayD<f64>) -> ArrayD<f64> {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("upsample [C,H,W]");
    let (c, h, w) = x3.dim();
    let mut out = Array3::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for y in 0..h {
            for x_ in 0..w {
                let v = x3[[ci, y, x_]];
                out[[ci, 2 * y, 2 * x_]] = v;
                out[[ci, 2 * y, 2 * x_ + 1]] = v;
                out[[ci, 2 * y + 1, 2 * x_]] = v;
                out[[ci, 2 * y + 1, 2 * x_ + 1]] = v;
            }
        }
    }
    out.into_dyn()
}

pub(crate) fn upsample2_backward(g: &ArrayD<f64>) -> ArrayD<f64> {
    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
    let (c, h2, w2) = g3.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x_ in 0..w {
                gx[[ci, y, x_]] = g3[[ci, 2 * y, 2 * x_]]
                    + g3[[ci, 2 * y, 2 * x_ + 1]]
                    + g3[[ci, 2 * y + 1, 2 * x_]]
                    + g3[[ci, 2 * y + 1, 2 * x_ + 1]];
            }
        }
    }
    gx.into_dyn()
}

/// Bilinear taps for a wrapped UV coordinate: indices of the two texels and
/// the fractional weight along one axis.
#[inline]
fn wrap_taps(coord_uv: f64, n: usize) -> (usize, usize, f64) {
    let p = coord_uv * n as f64 - 0.5;
    let f = p.floor();
    let frac = p - f;
    let i0 = (f as i64).rem_euclid(n as i64) as usize;
    let i1 = (i0 + 1) % n;
    (i0, i1, frac)
}

pub(crate) fn bilinear_wrap_forward(
    img: &ArrayD<f64>,
    gu: &ArrayD<f64>,
    gv: &ArrayD<f64>,
) -> ArrayD<f64> {
    let im = img.view().into_dimensionality::<Ix3>().expect("sample [C,H,W]");
    let gu2 = gu.view().into_dimensionality::<Ix2>().unwrap();
    let gv2 = gv.view().into_dimensionality::<Ix2>().unwrap();
    let (c, h, w) = im.dim();
    let (ho, wo) = gu2.dim();
    let mut out = Array3::zeros((c, ho, wo));
    for oy in 0..ho {
        for ox in 0..wo {
            let (x0, x1, fx) = wrap_taps(gu2[[oy, ox]], w);
            let (y0, y1, fy) = wrap_taps(gv2[[oy, ox]], h);
            for ci in 0..c {
                let v00 = im[[ci, y0, x0]];
                let v01 = im[[ci, y0, x1]];
                let v10 = im[[ci, y1, x0]];
                let v11 = im[[ci, y1, x1]];
                out[[ci, oy, ox]] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
    }
    out.into_dyn()
}

pub(crate) fn bilinear_wrap_backward(
    img: &ArrayD<f64>,
    gu: &ArrayD<f64>,
    gv: &ArrayD<f64>,
    g: &ArrayD<f64>,
    need_img: bool,
    need_grid: bool,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let im = img.view().into_dimensionality::<Ix3>().unwrap();
    let gu2 = gu.view().into_dimensionality::<Ix2>().unwrap();
    let gv2 = gv.view().into_dimensionality::<Ix2>().unwrap();
    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
    let (c, h, w) = im.dim();
    let (ho, wo) = gu2.dim();
    let mut gimg = Array3::zeros((c, h, w));
    let mut ggu = Array2::zeros((ho, wo));
    let mut ggv = Array2::zeros((ho, wo));
    for oy in 0..ho {
        for ox in 0..wo {
            let (x0, x1, fx) = wrap_taps(gu2[[oy, ox]], w);
            let (y0, y1, fy) = wrap_taps(gv2[[oy, ox]], h);
            let mut du = 0.0;
            let mut dv = 0.0;
            for ci in 0..c {
                let go = g3[[ci, oy, ox]];
                if go == 0.0 {
                    continue;
                }
                if need_img {
                    gimg[[ci, y0, x0]] += go * (1.0 - fy) * (1.0 - fx);
                    gimg[[ci, y0, x1]] += go * (1.0 - fy) * fx;
                    gimg[[ci, y1, x0]] += go * fy * (1.0 - fx);
                    gimg[[ci, y1, x1]] += go * fy * fx;
                }
                if need_grid {
                    let v00 = im[[ci, y0, x0]];
                    let v01 = im[[ci, y0, x1]];
                    let v10 = im[[ci, y1, x0]];
                    let v11 = im[[ci, y1, x1]];
                    // d/dfx and d/dfy of the bilinear blend
                    du += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                    dv += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
            }
            // chain through p = uv*n - 0.5
            ggu[[oy, ox]] = du * w as f64;
            ggv[[oy, ox]] = dv * h as f64;
        }
    }
    (gimg.into_dyn(), ggu.into_dyn(), ggv.into_dyn())
}
