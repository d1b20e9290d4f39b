//! Differentiable rendering operator: SVBRDF maps to an image under a fixed
//! point light and an orthographic top-down camera.
//!
//! The material plane is [-0.5, 0.5]^2 at z = 0 (units of plane width); the
//! default light sits at (0, 0, 2). Shading is Lambertian diffuse plus GGX
//! specular with Fresnel-Schlick, metallic blending the base color into F0,
//! inverse-square falloff, then exposure/gamma tone mapping into [0,1]. The
//! same operator serves optimization losses and report renders, so the setup
//! is serialized alongside every result.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSetup {
    /// Light position in units of plane width; the plane spans [-0.5, 0.5]^2.
    pub light_position: [f64; 3],
    pub light_intensity: f64,
    pub light_color: [f64; 3],
    pub exposure: f64,
    pub gamma: f64,
}

impl Default for RenderSetup {
    fn default() -> Self {
        RenderSetup {
            light_position: [0.0, 0.0, 2.0],
            light_intensity: 4.0,
            light_color: [1.0, 1.0, 1.0],
            exposure: 1.0,
            gamma: 2.2,
        }
    }
}

impl RenderSetup {
    pub fn validate(&self) -> Result<()> {
        if self.light_position[2] <= 0.0 {
            return Err(Error::Config("light must sit above the plane (z > 0)".into()));
        }
        if self.light_intensity <= 0.0 {
            return Err(Error::Config("light intensity must be positive".into()));
        }
        if self.gamma <= 0.0 || self.exposure <= 0.0 {
            return Err(Error::Config("exposure and gamma must be positive".into()));
        }
        Ok(())
    }
}

/// Material map bundle as tape tensors: albedo/normal [3,H,W],
/// roughness/metallic [1,H,W].
pub struct MapsT {
    pub albedo: Tensor,
    pub normal: Tensor,
    pub roughness: Tensor,
    pub metallic: Tensor,
}

impl MapsT {
    pub fn resolution(&self) -> (usize, usize) {
        (self.albedo.shape()[1], self.albedo.shape()[2])
    }

    fn check(&self) -> Result<()> {
        let (h, w) = self.resolution();
        let want = |t: &Tensor, c: usize, what: &str| -> Result<()> {
            if t.shape() != [c, h, w] {
                return Err(Error::Graph(format!(
                    "{what} map has shape {:?}, expected [{c},{h},{w}]",
                    t.shape()
                )));
            }
            Ok(())
        };
        want(&self.albedo, 3, "albedo")?;
        want(&self.normal, 3, "normal")?;
        want(&self.roughness, 1, "roughness")?;
        want(&self.metallic, 1, "metallic")
    }
}

/// Roughness floor keeping the GGX lobe finite.
const MIN_ROUGHNESS: f64 = 0.045;
/// Tone-map offset keeping the gamma curve's gradient finite at zero.
const TONE_EPS: f64 = 1e-6;

/// Tone-mapped render in [0,1]: differentiable w.r.t. every map.
pub fn render(maps: &MapsT, setup: &RenderSetup) -> Result<Tensor> {
    let linear = render_linear(maps, setup)?;
    let inv_gamma = 1.0 / setup.gamma;
    let knee = TONE_EPS.powf(inv_gamma);
    Ok(linear
        .mul_c(setup.exposure)
        .add_c(TONE_EPS)
        .pow_c(inv_gamma)
        .add_c(-knee)
        .min_c(1.0))
}

/// Linear-space radiance (no exposure/gamma). Doubling the light intensity
/// doubles every pixel of this output exactly.
pub fn render_linear(maps: &MapsT, setup: &RenderSetup) -> Result<Tensor> {
    setup.validate()?;
    maps.check()?;
    let (h, w) = maps.resolution();
    let tape = maps.albedo.tape().clone();

    // Constant per-pixel geometry: light direction l, half vector h (the
    // view direction is the constant +z), squared distance falloff.
    let mut lx = Array2::<f64>::zeros((h, w));
    let mut ly = Array2::<f64>::zeros((h, w));
    let mut lz = Array2::<f64>::zeros((h, w));
    let mut hx = Array2::<f64>::zeros((h, w));
    let mut hy = Array2::<f64>::zeros((h, w));
    let mut hz = Array2::<f64>::zeros((h, w));
    let mut falloff = Array2::<f64>::zeros((h, w));
    let mut fresnel_pow = Array2::<f64>::zeros((h, w));
    let lp = setup.light_position;
    for y in 0..h {
        for x in 0..w {
            let px = (x as f64 + 0.5) / w as f64 - 0.5;
            let py = (y as f64 + 0.5) / h as f64 - 0.5;
            let dx = lp[0] - px;
            let dy = lp[1] - py;
            let dz = lp[2];
            let r2 = dx * dx + dy * dy + dz * dz;
            let r = r2.sqrt();
            let (ldx, ldy, ldz) = (dx / r, dy / r, dz / r);
            lx[[y, x]] = ldx;
            ly[[y, x]] = ldy;
            lz[[y, x]] = ldz;
            let (hxx, hyy, hzz) = (ldx, ldy, ldz + 1.0);
            let hn = (hxx * hxx + hyy * hyy + hzz * hzz).sqrt();
            hx[[y, x]] = hxx / hn;
            hy[[y, x]] = hyy / hn;
            hz[[y, x]] = hzz / hn;
            falloff[[y, x]] = 1.0 / r2;
            // h·v with v = (0,0,1)
            fresnel_pow[[y, x]] = (1.0 - hzz / hn).powi(5);
        }
    }
    let grid = |a: Array2<f64>| -> Tensor {
        tape.constant(
            a.into_shape_with_order(IxDyn(&[1, h, w]))
                .expect("grid reshape"),
        )
    };
    let (lx, ly, lz) = (grid(lx), grid(ly), grid(lz));
    let (hx, hy, hz) = (grid(hx), grid(hy), grid(hz));
    let falloff = grid(falloff);
    let fp = grid(fresnel_pow);

    // decode and renormalize normals
    let n_dec = maps.normal.mul_c(2.0).add_c(-1.0);
    {
        let v = n_dec.value();
        let mut worst = 0.0f64;
        for yx in 0..(h * w) {
            let (y, x) = (yx / w, yx % w);
            let n2 = v[[0, y, x]] * v[[0, y, x]]
                + v[[1, y, x]] * v[[1, y, x]]
                + v[[2, y, x]] * v[[2, y, x]];
            worst = worst.max((n2.sqrt() - 1.0).abs());
        }
        if worst > 1e-3 {
            log::warn!("normal map deviates from unit length by up to {worst:.3e}; renormalizing");
        }
    }
    let (nx, ny, nz) = (n_dec.slice_c(0, 1), n_dec.slice_c(1, 1), n_dec.slice_c(2, 1));
    let inv_len = nx
        .sqr()
        .add(&ny.sqr())
        .add(&nz.sqr())
        .add_c(1e-12)
        .sqrt_t()
        .pow_c(-1.0);
    let (nx, ny, nz) = (nx.mul(&inv_len), ny.mul(&inv_len), nz.mul(&inv_len));

    let ndl = nx
        .mul(&lx)
        .add(&ny.mul(&ly))
        .add(&nz.mul(&lz))
        .max_c(0.0);
    let ndv = nz.max_c(1e-6);
    let ndh = nx
        .mul(&hx)
        .add(&ny.mul(&hy))
        .add(&nz.mul(&hz))
        .max_c(0.0);

    // GGX normal distribution with alpha = roughness^2
    let a = maps.roughness.max_c(MIN_ROUGHNESS).sqr();
    let a2 = a.sqr();
    let denom = ndh.sqr().mul(&a2.add_c(-1.0)).add_c(1.0);
    let dist = a2.div(&denom.sqr().mul_c(std::f64::consts::PI));

    // Smith-Schlick masking with k = alpha / 2
    let k = a.mul_c(0.5);
    let one_minus_k = k.neg().add_c(1.0);
    let g1 = |x: &Tensor| -> Tensor { x.div(&x.mul(&one_minus_k).add(&k)) };
    let geom = g1(&ndl).mul(&g1(&ndv));

    // Fresnel-Schlick with metallic-blended F0
    let one_minus_m = maps.metallic.neg().add_c(1.0);
    let f0_dielectric = one_minus_m.mul_c(0.04);
    let f0 = maps
        .albedo
        .mul_bcast_c(&maps.metallic)
        .add(&three(&f0_dielectric));
    let one_minus_fp = fp.neg().add_c(1.0);
    let fresnel = f0.mul_bcast_c(&one_minus_fp).add(&three(&fp));

    // specular and diffuse terms, both folded with n·l and the light falloff
    let spec_scalar = dist
        .mul(&geom)
        .div(&ndl.mul(&ndv).mul_c(4.0).add_c(1e-7))
        .mul(&ndl);
    let specular = fresnel.mul_bcast_c(&spec_scalar);
    let diffuse = maps
        .albedo
        .mul_bcast_c(&one_minus_m)
        .mul_c(1.0 / std::f64::consts::PI)
        .mul_bcast_c(&ndl);

    let light_scale = falloff.mul_c(setup.light_intensity);
    let color = tape.constant(
        ArrayD::from_shape_vec(IxDyn(&[3]), setup.light_color.to_vec()).unwrap(),
    );
    Ok(diffuse
        .add(&specular)
        .mul_bcast_c(&light_scale)
        .mul_axis(&color, 0))
}

fn three(x: &Tensor) -> Tensor {
    Tensor::concat_c(&[x, x, x])
}

/// Render plain material maps (albedo/normal [3,H,W], roughness/metallic
/// [H,W]) outside any optimization tape.
pub fn render_arrays(
    albedo: &Array3<f64>,
    normal: &Array3<f64>,
    roughness: &Array2<f64>,
    metallic: &Array2<f64>,
    setup: &RenderSetup,
) -> Result<Array3<f64>> {
    let tape = Tape::new();
    let (h, w) = roughness.dim();
    let to_t = |a: ArrayD<f64>| tape.constant(a);
    let maps = MapsT {
        albedo: to_t(albedo.clone().into_dyn()),
        normal: to_t(normal.clone().into_dyn()),
        roughness: to_t(roughness.clone().into_dyn().into_shape_with_order(IxDyn(&[1, h, w])).unwrap()),
        metallic: to_t(metallic.clone().into_dyn().into_shape_with_order(IxDyn(&[1, h, w])).unwrap()),
    };
    let out = render(&maps, setup)?;
    let v = out.value();
    let mut img = Array3::zeros((3, h, w));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                img[[c, y, x]] = v[[c, y, x]];
            }
        }
    }
    Ok(img)
}
