//! Reference implementations of the non-differentiable pattern generators
//! `G(θ)`: the ground truth the neural proxies approximate, and the engines
//! used before and after proxy-mode optimization.
//!
//! Guarantees, enforced by tests:
//! - Purity: output is a function of (name, params, seed, resolution) only.
//! - Determinism: identical inputs produce bitwise-identical pixels.
//! - Tileability: all geometry is computed in wrapped cell coordinates, so an
//!   integer phase shift of the geometry equals a circular shift of the image,
//!   exactly.
//! - Range: every pixel lies in [0, 1].
//!
//! The individual pattern formulas are documented re-specifications (the
//! commercial nodes they stand in for are proprietary); see [`patterns`].

pub mod patterns;
mod spec;

pub use spec::{ParamEntry, ParamKind, ParamSpec};

use std::collections::BTreeMap;
use std::sync::OnceLock;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One concrete parameter assignment for a generator, in raw units.
/// `seed` drives all stochastic pattern content (element jitter, scratch
/// placement); it is not part of the optimizable parameter vector.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamVector {
    pub spec_hash: String,
    pub values: Vec<f64>,
    pub seed: u64,
}

/// Single-channel pattern map in [0,1]; the common currency of generators,
/// proxies, and mask-consuming filters.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorImage {
    pub pixels: Array2<f64>,
}

impl GeneratorImage {
    pub fn resolution(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    /// Check the type invariant: finite pixels in [0,1].
    pub fn validate(&self) -> Result<()> {
        for &v in self.pixels.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Numeric(format!(
                    "generator image pixel {v} outside [0,1]"
                )));
            }
        }
        Ok(())
    }
}

/// All registered generator names, in canonical order.
pub const GENERATOR_NAMES: [&str; 6] = [
    "brick",
    "stripe",
    "scratches",
    "tile_paraboloid",
    "tile_brick",
    "arc_pavement",
];

fn registry() -> &'static BTreeMap<&'static str, ParamSpec> {
    static REGISTRY: OnceLock<BTreeMap<&'static str, ParamSpec>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut m = BTreeMap::new();
        m.insert("brick", spec::brick_spec());
        m.insert("stripe", spec::stripe_spec());
        m.insert("scratches", spec::scratches_spec());
        m.insert("tile_paraboloid", spec::tile_paraboloid_spec());
        m.insert("tile_brick", spec::tile_brick_spec());
        m.insert("arc_pavement", spec::arc_pavement_spec());
        m
    })
}

/// The canonical parameter spec for a registered generator, priors included.
pub fn generator_spec(name: &str) -> Result<&'static ParamSpec> {
    registry()
        .get(name)
        .ok_or_else(|| Error::UnknownGenerator(name.to_string()))
}

/// Validate a parameter vector against a generator's registered spec:
/// hash binding, arity, ranges, and discrete grid membership.
pub fn validate_params(name: &str, params: &ParamVector) -> Result<&'static ParamSpec> {
    let spec = generator_spec(name)?;
    if params.spec_hash != spec.version_hash {
        return Err(Error::SpecHashMismatch {
            expected: spec.version_hash.clone(),
            got: params.spec_hash.clone(),
        });
    }
    spec.validate_values(&params.values)?;
    Ok(spec)
}

/// Evaluate a generator at the given resolution.
///
/// Deterministic: identical (name, params, seed, resolution) produce
/// bitwise-identical pixels. Rejects out-of-range or off-grid values rather
/// than clamping them silently.
pub fn evaluate_generator(
    name: &str,
    params: &ParamVector,
    resolution: (usize, usize),
) -> Result<GeneratorImage> {
    evaluate_generator_shifted(name, params, resolution, (0, 0))
}

/// Evaluate with all geometry phase-shifted by `(dx/W, dy/H)`, i.e. the
/// pattern translated by `shift` pixels. By construction the result equals
/// the circular shift of the unshifted image; the tileability suite verifies
/// that property pixel-for-pixel.
pub fn evaluate_generator_shifted(
    name: &str,
    params: &ParamVector,
    resolution: (usize, usize),
    shift: (i64, i64),
) -> Result<GeneratorImage> {
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    validate_params(name, params)?;
    let pixels = match name {
        "brick" => patterns::brick(&params.values, params.seed, h, w, shift),
        "stripe" => patterns::stripe(&params.values, h, w, shift),
        "scratches" => patterns::scratches(&params.values, params.seed, h, w, shift),
        "tile_paraboloid" => patterns::tile_paraboloid(&params.values, params.seed, h, w, shift),
        "tile_brick" => patterns::tile_brick(&params.values, h, w, shift),
        "arc_pavement" => patterns::arc_pavement(&params.values, params.seed, h, w, shift),
        _ => return Err(Error::UnknownGenerator(name.to_string())),
    };
    Ok(GeneratorImage { pixels })
}

/// Count connected components of the 0.5-superlevel set with 4-connectivity
/// on the torus (edges wrap). Used by the brick validity predicate and the
/// discreteness property tests.
pub fn level_set_components(img: &Array2<f64>, threshold: f64) -> usize {
    let (h, w) = img.dim();
    let n = h * w;
    let mut parent: Vec<u32> = (0..n as u32).collect();
    fn find(parent: &mut [u32], mut i: u32) -> u32 {
        while parent[i as usize] != i {
            parent[i as usize] = parent[parent[i as usize] as usize];
            i = parent[i as usize];
        }
        i
    }
    let on = |y: usize, x: usize| img[[y, x]] >= threshold;
    for y in 0..h {
        for x in 0..w {
            if !on(y, x) {
                continue;
            }
            let i = (y * w + x) as u32;
            let right = (y * w + (x + 1) % w) as u32;
            let down = (((y + 1) % h) * w + x) as u32;
            if on(y, (x + 1) % w) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, right));
                if a != b {
                    parent[a as usize] = b;
                }
            }
            if on((y + 1) % h, x) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, down));
                if a != b {
                    parent[a as usize] = b;
                }
            }
        }
    }
    let mut count = 0;
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as u32;
            if on(y, x) && find(&mut parent, i) == i {
                count += 1;
            }
        }
    }
    count
}

/// Resolution used by validity predicates; fixed so sampling stays
/// deterministic regardless of the dataset resolution.
const VALIDITY_PROBE_RES: usize = 64;

/// Optional per-generator plausibility check used by dataset sampling.
/// Returns true when the parameter draw produces a usable pattern. Only
/// `brick` has a predicate: the 0.5-level set must keep at least half of the
/// nominal brick count as separate components (very thin mortar at extreme
/// brick counts can merge at the probe resolution; such draws are resampled).
pub fn is_plausible(name: &str, params: &ParamVector) -> Result<bool> {
    match name {
        "brick" => {
            let img = evaluate_generator(
                name,
                params,
                (VALIDITY_PROBE_RES, VALIDITY_PROBE_RES),
            )?;
            let xa = params.values[0] as usize;
            let ya = params.values[1] as usize;
            let comps = level_set_components(&img.pixels, 0.5);
            Ok(comps * 2 >= xa * ya)
        }
        _ => Ok(true),
    }
}

/// Build a ParamVector bound to a generator's spec (validating values).
pub fn make_params(name: &str, values: Vec<f64>, seed: u64) -> Result<ParamVector> {
    let spec = generator_spec(name)?;
    spec.validate_values(&values)?;
    Ok(ParamVector {
        spec_hash: spec.version_hash.clone(),
        values,
        seed,
    })
}
