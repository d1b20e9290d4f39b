//! Closed-form pattern geometry for the six generators.
//!
//! Every pattern value is a pure function of the wrapped pixel coordinate
//! (plus parameters and seed-derived element tables), which is what makes the
//! exact-tileability invariant hold: a phase shift in integer pixels simply
//! re-indexes which wrapped coordinate each output pixel sees.
//!
//! Conventions shared by all generators:
//! - Pixel (y, x) samples the coordinate `u = (x'+0.5)/W`, `v = (y'+0.5)/H`
//!   where `(x', y')` is the shift-wrapped integer pixel index.
//! - Cell decompositions compute a cell index and in-cell fractions
//!   `(fu, fv) ∈ [0,1)`.
//! - `gap` is measured in cell units; a value of 1 makes the mortar band
//!   cover the whole cell.
//! - Per-element intensity jitter multiplies by `1 - jitter * x_elem` with
//!   `x_elem ∈ [0,1)` drawn from a seed-derived per-element stream, so it is
//!   stable under parameter changes that keep the element count fixed.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::util::rng::{domain, mix, substream, unit_f64};

#[inline]
fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

#[inline]
fn frac(x: f64) -> f64 {
    x - x.floor()
}

/// Jitter value in [0,1) for element `key` of pattern `seed`.
#[inline]
fn element_unit(seed: u64, key: u64) -> f64 {
    unit_f64(mix(seed, &[domain::ELEMENT, key]))
}

/// Iterate output pixels, handing the closure the wrapped (u, v) coordinate.
fn fill(h: usize, w: usize, shift: (i64, i64), mut f: impl FnMut(f64, f64) -> f64) -> Array2<f64> {
    let (sx, sy) = shift;
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        let iy = (y as i64 - sy).rem_euclid(h as i64) as usize;
        let v = (iy as f64 + 0.5) / h as f64;
        for x in 0..w {
            let ix = (x as i64 - sx).rem_euclid(w as i64) as usize;
            let u = (ix as f64 + 0.5) / w as f64;
            out[[y, x]] = f(u, v);
        }
    }
    out
}

/// Cell decomposition with per-row horizontal offset (in cell units).
#[inline]
fn cell(u: f64, v: f64, nx: i64, ny: i64, row_offset: impl Fn(i64) -> f64) -> (i64, i64, f64, f64) {
    let sv = v * ny as f64;
    let row = sv.floor() as i64; // v < 1 keeps row in [0, ny)
    let fv = sv - row as f64;
    let su = u * nx as f64 + row_offset(row);
    let colf = su.floor();
    let fu = su - colf;
    let col = (colf as i64).rem_euclid(nx);
    (col, row, fu, fv)
}

/// Brick wall: axis-aligned cells, alternate rows shifted by `offset` cell
/// widths, mortar of width `gap`, edge ramp of width `bevel`, per-brick
/// intensity jitter. values = [x_amount, y_amount, offset, gap, bevel, jitter]
pub fn brick(values: &[f64], seed: u64, h: usize, w: usize, shift: (i64, i64)) -> Array2<f64> {
    let (nx, ny) = (values[0] as i64, values[1] as i64);
    let (offset, gap, bevel, jitter) = (values[2], values[3], values[4], values[5]);
    let jit = element_table(seed, nx, ny);
    fill(h, w, shift, |u, v| {
        let (col, row, fu, fv) = cell(u, v, nx, ny, |r| offset * (r % 2) as f64);
        let d = fu.min(1.0 - fu).min(fv).min(1.0 - fv) - gap * 0.5;
        let base = if bevel > 0.0 {
            clamp01(d / bevel)
        } else if d > 0.0 {
            1.0
        } else {
            0.0
        };
        base * (1.0 - jitter * jit[(row * nx + col) as usize])
    })
}

/// Grid-aligned tiles with a flat plateau and a bevel ramp to the mortar.
/// values = [x_amount, y_amount, gap, bevel]
pub fn tile_brick(values: &[f64], h: usize, w: usize, shift: (i64, i64)) -> Array2<f64> {
    let (nx, ny) = (values[0] as i64, values[1] as i64);
    let (gap, bevel) = (values[2], values[3]);
    fill(h, w, shift, |u, v| {
        let (_c, _r, fu, fv) = cell(u, v, nx, ny, |_| 0.0);
        let d = fu.min(1.0 - fu).min(fv).min(1.0 - fv) - gap * 0.5;
        if bevel > 0.0 {
            clamp01(d / bevel)
        } else if d > 0.0 {
            1.0
        } else {
            0.0
        }
    })
}

/// Radial paraboloid tile profile: inside the gap-shrunk cell the height is
/// `max(0, 1 - ((2s-1)^2 + (2t-1)^2))` over rescaled in-cell coordinates.
/// values = [x_amount, y_amount, gap, jitter]
pub fn tile_paraboloid(
    values: &[f64],
    seed: u64,
    h: usize,
    w: usize,
    shift: (i64, i64),
) -> Array2<f64> {
    let (nx, ny) = (values[0] as i64, values[1] as i64);
    let (gap, jitter) = (values[2], values[3]);
    let half = gap * 0.5;
    let inv = 1.0 / (1.0 - gap);
    let jit = element_table(seed, nx, ny);
    fill(h, w, shift, |u, v| {
        let (col, row, fu, fv) = cell(u, v, nx, ny, |_| 0.0);
        if fu < half || fu > 1.0 - half || fv < half || fv > 1.0 - half {
            return 0.0;
        }
        let s = (fu - half) * inv;
        let t = (fv - half) * inv;
        let profile = (1.0 - ((2.0 * s - 1.0).powi(2) + (2.0 * t - 1.0).powi(2))).max(0.0);
        profile * (1.0 - jitter * jit[(row * nx + col) as usize])
    })
}

/// Oriented periodic bands. `angle` is restricted to torus-compatible
/// directions (0/45/90/135 degrees) so stripes wrap exactly; `duty` is the
/// on-fraction; `softness` is the total transition width of the band edge.
/// values = [count, angle, duty, softness, phase]
pub fn stripe(values: &[f64], h: usize, w: usize, shift: (i64, i64)) -> Array2<f64> {
    let count = values[0];
    let angle = values[1];
    let (duty, softness, phase) = (values[2], values[3], values[4]);
    let half = duty * 0.5;
    fill(h, w, shift, |u, v| {
        let coord = match angle as i64 {
            0 => v,
            45 => frac(u + v),
            90 => u,
            _ => frac(u - v + 1.0), // 135
        };
        let t = frac(count * coord + phase);
        let dd = (t - half).abs();
        let dist = dd.min(1.0 - dd);
        if softness > 0.0 {
            clamp01((half - dist) / softness + 0.5)
        } else if dist < half {
            1.0
        } else {
            0.0
        }
    })
}

/// Concentric fans of wedge bricks: staggered cells, each holding a quarter
/// fan anchored at the cell origin, split into `rings` radial and `wedges`
/// angular bricks with mortar `gap` (in ring/wedge units).
/// values = [x_amount, y_amount, rings, wedges, gap, jitter]
pub fn arc_pavement(
    values: &[f64],
    seed: u64,
    h: usize,
    w: usize,
    shift: (i64, i64),
) -> Array2<f64> {
    let (nx, ny) = (values[0] as i64, values[1] as i64);
    let (rings, wedges) = (values[2] as i64, values[3] as i64);
    let (gap, jitter) = (values[4], values[5]);
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let inv_quarter = 2.0 / std::f64::consts::PI;
    fill(h, w, shift, |u, v| {
        let (col, row, fu, fv) = cell(u, v, nx, ny, |r| 0.5 * (r % 2) as f64);
        let r = fu.hypot(fv) * inv_sqrt2; // [0, 1)
        let phi = fv.atan2(fu) * inv_quarter; // [0, 1]
        let ring_s = r * rings as f64;
        let ring = (ring_s.floor() as i64).min(rings - 1);
        let fr = ring_s - ring as f64;
        let wedge_s = phi * wedges as f64;
        let wedge = (wedge_s.floor() as i64).min(wedges - 1);
        let fw = wedge_s - wedge as f64;
        let d = fr.min(1.0 - fr).min(fw).min(1.0 - fw) - gap * 0.5;
        if d > 0.0 {
            let key = (((row * nx + col) * 8 + ring) as u64) * 32 + wedge as u64;
            1.0 - jitter * element_unit(seed, key)
        } else {
            0.0
        }
    })
}

/// Seeded line segments with a Gaussian cross-profile. Positions are uniform
/// on the torus, orientations follow a von-Mises-like wrapped-normal spread
/// around `angle` (in turns), and length/width/intensity carry fixed
/// relative jitter. The profile is floored at the cutoff radius so
/// contributions vanish continuously.
/// values = [count, angle, spread, length, width, depth]
pub fn scratches(values: &[f64], seed: u64, h: usize, w: usize, shift: (i64, i64)) -> Array2<f64> {
    let count = values[0] as usize;
    let (angle, spread, length, width, depth) =
        (values[1], values[2], values[3], values[4], values[5]);

    struct Instance {
        ax: f64,
        ay: f64,
        dx: f64,
        dy: f64,
        len2: f64,
        inv_two_sigma2: f64,
        amp: f64,
        r2_cut: f64,
        bb: [f64; 4], // x0, x1, y0, y1
    }

    const CUT_SIGMAS: f64 = 3.5;
    let floor_profile = (-0.5 * CUT_SIGMAS * CUT_SIGMAS).exp();
    let renorm = 1.0 / (1.0 - floor_profile);

    let mut instances: Vec<Instance> = Vec::with_capacity(count * 9);
    for i in 0..count {
        let mut rng = substream(seed, domain::ELEMENT, &[i as u64]);
        let cx: f64 = rng.random();
        let cy: f64 = rng.random();
        let z: f64 = rng.sample(StandardNormal);
        let len_jit: f64 = 0.7 + 0.6 * rng.random::<f64>();
        let width_jit: f64 = 0.6 + 0.8 * rng.random::<f64>();
        let amp_jit: f64 = 0.7 + 0.3 * rng.random::<f64>();

        let theta = (angle + spread * 0.25 * z) * std::f64::consts::TAU;
        let (dirx, diry) = (theta.cos(), theta.sin());
        let half_len = 0.5 * length * len_jit;
        let sigma = (width * width_jit).max(1e-9);
        let amp = depth * amp_jit;
        let r_cut = CUT_SIGMAS * sigma;

        for oy in -1i64..=1 {
            for ox in -1i64..=1 {
                let ax = cx - dirx * half_len + ox as f64;
                let ay = cy - diry * half_len + oy as f64;
                let bx = cx + dirx * half_len + ox as f64;
                let by = cy + diry * half_len + oy as f64;
                let bb = [
                    ax.min(bx) - r_cut,
                    ax.max(bx) + r_cut,
                    ay.min(by) - r_cut,
                    ay.max(by) + r_cut,
                ];
                if bb[1] < 0.0 || bb[0] > 1.0 || bb[3] < 0.0 || bb[2] > 1.0 {
                    continue;
                }
                instances.push(Instance {
                    ax,
                    ay,
                    dx: bx - ax,
                    dy: by - ay,
                    len2: ((bx - ax) * (bx - ax) + (by - ay) * (by - ay)).max(1e-12),
                    inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                    amp,
                    r2_cut: r_cut * r_cut,
                    bb,
                });
            }
        }
    }

    fill(h, w, shift, |u, v| {
        let mut val: f64 = 0.0;
        for inst in &instances {
            if u < inst.bb[0] || u > inst.bb[1] || v < inst.bb[2] || v > inst.bb[3] {
                continue;
            }
            let px = u - inst.ax;
            let py = v - inst.ay;
            let t = clamp01((px * inst.dx + py * inst.dy) / inst.len2);
            let ex = px - t * inst.dx;
            let ey = py - t * inst.dy;
            let d2 = ex * ex + ey * ey;
            if d2 < inst.r2_cut {
                let profile = ((-d2 * inst.inv_two_sigma2).exp() - floor_profile) * renorm;
                val = val.max(inst.amp * profile);
            }
        }
        val
    })
}

/// Per-cell jitter table: one unit draw per (row, col).
fn element_table(seed: u64, nx: i64, ny: i64) -> Vec<f64> {
    let mut t = Vec::with_capacity((nx * ny) as usize);
    for row in 0..ny {
        for col in 0..nx {
            t.push(element_unit(seed, (row * nx + col) as u64));
        }
    }
    t
}
