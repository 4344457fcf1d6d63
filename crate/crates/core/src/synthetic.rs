//! Procedural ground-truth avatar and multi-view sequence with known answers.
//!
//! The head is an ellipsoidal UV sphere (0.2 units tall) with a neck and a jaw
//! joint, three local expression blend shapes, displacement bumps on the nose and
//! cheeks, a checker-plus-gradient skin texture with view and expression effects,
//! and a Gaussian hair cap whose expression-driven sway is an exact ReLU field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::avatar::{Avatar, RenderSettings};
use crate::error::{param_err, Result};
use crate::geometry::{DisplacementModel, ExpressionParams, HeadModel, Joint};
use crate::imaging::{ColorImage, MaskImage, ScalarImage};
use crate::micronet::{Activation, Layer, Mlp};
use crate::optim::FrameRecord;
use crate::raster::{Camera, Vec3};
use crate::splat::{
    init_from_scalp, logit, project_gaussian, DeformationField, GaussianCloud, Projected, SH_C0,
    TRANSMITTANCE_FLOOR,
};
use crate::texture::{default_decoder, TextureConfig, TextureStack};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub resolution: usize,
    pub focal: f64,
    pub camera_distance: f64,
    /// Camera elevation above the head centre, radians.
    pub elevation: f64,
    pub n_views: usize,
    pub n_frames: usize,
    pub lat: usize,
    pub lon: usize,
    pub subdivisions: usize,
    pub texture: TextureConfig,
    pub displacement_resolution: usize,
    pub n_hair: usize,
    /// Extra Gaussians hanging behind the head (occlusion-heavy variant).
    pub n_long_hair: usize,
    /// Peak hair sway (scene units) per unit expression coefficient.
    pub sway: f64,
    /// Peak displacement of the nose bump.
    pub bump: f64,
    /// Render targets with [`render_occluded`] instead of the avatar's own blend path.
    pub exact_occlusion: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 7,
            resolution: 128,
            focal: 250.0,
            camera_distance: 0.55,
            elevation: 0.2,
            n_views: 8,
            n_frames: 20,
            lat: 12,
            lon: 24,
            subdivisions: 2,
            texture: TextureConfig {
                resolution: 128,
                coarse_resolution: 32,
                channels: 4,
                dynamic_k: 3,
            },
            displacement_resolution: 32,
            n_hair: 200,
            n_long_hair: 0,
            sway: 0.008,
            bump: 0.004,
            exact_occlusion: false,
        }
    }
}

/// Ground truth plus every rendered view.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub config: SyntheticConfig,
    pub avatar: Avatar,
    pub cameras: Vec<Camera>,
    pub sequence: Vec<ExpressionParams>,
    /// Frame-major: record `f * n_views + v`.
    pub records: Vec<FrameRecord>,
}

const RADII: [f64; 3] = [0.085, 0.1, 0.092];
const N_EXPR: usize = 3;
const SCALP_MAX_V: f64 = 1.0 / 3.0 + 1e-9;

fn ellipsoid_point(u: f64, v: f64) -> Vec3 {
    let (theta, phi) = (
        std::f64::consts::PI * v,
        2.0 * std::f64::consts::PI * (u - 0.5),
    );
    Vec3::new(
        RADII[0] * theta.sin() * phi.sin(),
        RADII[1] * theta.cos(),
        RADII[2] * theta.sin() * phi.cos(),
    )
}

fn ellipsoid_normal(p: &Vec3) -> Vec3 {
    let n = Vec3::new(
        p.x / (RADII[0] * RADII[0]),
        p.y / (RADII[1] * RADII[1]),
        p.z / (RADII[2] * RADII[2]),
    );
    if n.norm() > 0.0 {
        n.normalize()
    } else {
        Vec3::new(0.0, 1.0, 0.0)
    }
}

/// Compact smooth bump in uv space: `(1 - r^2/R^2)^2` inside radius `R`.
fn bump(uv: [f64; 2], center: [f64; 2], radius: f64) -> f64 {
    let r2 = ((uv[0] - center[0]).powi(2) + (uv[1] - center[1]).powi(2)) / (radius * radius);
    if r2 < 1.0 {
        (1.0 - r2).powi(2)
    } else {
        0.0
    }
}

fn smoothstep(a: f64, b: f64, x: f64) -> f64 {
    let t = ((x - a) / (b - a)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// UV-sphere head with a neck root joint and a jaw joint.
pub fn head_model(lat: usize, lon: usize) -> Result<HeadModel> {
    if lat < 3 || lon < 3 {
        return param_err("head needs at least 3 latitude and longitude segments");
    }
    let mut template = Vec::new();
    let mut uvs = Vec::new();
    for j in 0..lon {
        let u = (j as f64 + 0.5) / lon as f64;
        template.push(ellipsoid_point(u, 0.0));
        uvs.push([u, 0.0]);
    }
    let ring = |i: usize, j: usize| (lon + (i - 1) * (lon + 1) + j) as u32;
    for i in 1..lat {
        for j in 0..=lon {
            let (u, v) = (j as f64 / lon as f64, i as f64 / lat as f64);
            template.push(ellipsoid_point(u, v));
            uvs.push([u, v]);
        }
    }
    let bottom = template.len() as u32;
    for j in 0..lon {
        let u = (j as f64 + 0.5) / lon as f64;
        template.push(ellipsoid_point(u, 1.0));
        uvs.push([u, 1.0]);
    }
    let mut faces = Vec::new();
    for j in 0..lon {
        faces.push([j as u32, ring(1, j), ring(1, j + 1)]);
    }
    for i in 1..lat - 1 {
        for j in 0..lon {
            let (a, b, c, d) = (
                ring(i, j),
                ring(i, j + 1),
                ring(i + 1, j),
                ring(i + 1, j + 1),
            );
            faces.push([a, c, b]);
            faces.push([b, c, d]);
        }
    }
    for j in 0..lon {
        faces.push([ring(lat - 1, j), bottom + j as u32, ring(lat - 1, j + 1)]);
    }
    let n = template.len();
    let mut shape_basis = vec![0.0; n * 3 * 2];
    let mut expr_basis = vec![0.0; n * 3 * N_EXPR];
    let mut skin_weights = vec![0.0; n * 2];
    let mut scalp = Vec::new();
    for v in 0..n {
        let p = template[v];
        let uv = uvs[v];
        let nrm = ellipsoid_normal(&p);
        shape_basis[(v * 3 + 1) * 2] = 0.1 * p.y;
        shape_basis[v * 3 * 2 + 1] = 0.1 * p.x;
        let mouth = bump(uv, [0.5, 0.68], 0.08);
        let cheeks = bump(uv, [0.4, 0.6], 0.07) + bump(uv, [0.6, 0.6], 0.07);
        let brow = bump(uv, [0.5, 0.43], 0.07);
        for a in 0..3 {
            expr_basis[(v * 3 + a) * N_EXPR] = 0.006 * mouth * nrm[a];
            expr_basis[(v * 3 + a) * N_EXPR + 1] = 0.005 * cheeks * nrm[a];
        }
        expr_basis[(v * 3 + 1) * N_EXPR + 2] = 0.004 * brow;
        let front = smoothstep(0.2, 0.6, p.z / RADII[2]);
        let jaw = smoothstep(0.6, 0.72, uv[1]) * front;
        skin_weights[v * 2] = 1.0 - jaw;
        skin_weights[v * 2 + 1] = jaw;
        if uv[1] <= SCALP_MAX_V {
            scalp.push(v as u32);
        }
    }
    let model = HeadModel {
        template,
        faces,
        uvs,
        n_shape: 2,
        shape_basis,
        n_expr: N_EXPR,
        expr_basis,
        joints: vec![
            Joint {
                rest: Vec3::new(0.0, -0.1, 0.0),
                parent: None,
            },
            Joint {
                rest: Vec3::new(0.0, -0.04, 0.02),
                parent: Some(0),
            },
        ],
        skin_weights,
        scalp,
    };
    model.validate()?;
    Ok(model)
}

/// Sinusoidal expressions and a small head rotation; frame 0 is all zeros.
pub fn sequence(model: &HeadModel, n_frames: usize) -> Vec<ExpressionParams> {
    use std::f64::consts::PI;
    (0..n_frames)
        .map(|t| {
            let s = 2.0 * PI * t as f64 / n_frames.max(1) as f64;
            let mut p = ExpressionParams::zeros(model);
            p.psi = vec![s.sin(), (2.0 * s).sin(), (1.5 * s).sin()];
            p.phi[0] = 0.04 * s.sin();
            p.phi[1] = 0.1 * (2.0 * s).sin();
            p.phi[2] = 0.03 * (3.0 * s).sin();
            p.phi[3] = 0.08 * (1.0 - s.cos()) * 0.5;
            p
        })
        .collect()
}

/// Cameras evenly spaced on a ring around the head, view 0 in front.
pub fn ring_cameras(cfg: &SyntheticConfig) -> Vec<Camera> {
    (0..cfg.n_views)
        .map(|k| {
            let az = 2.0 * std::f64::consts::PI * k as f64 / cfg.n_views as f64;
            let r = cfg.camera_distance;
            let eye = Vec3::new(
                r * cfg.elevation.cos() * az.sin(),
                r * cfg.elevation.sin(),
                r * cfg.elevation.cos() * az.cos(),
            );
            Camera::look_at(
                eye,
                Vec3::zeros(),
                Vec3::new(0.0, 1.0, 0.0),
                cfg.focal,
                cfg.resolution,
                cfg.resolution,
            )
        })
        .collect()
}

/// Decoder with `rgb = sigmoid(l_c + 0.5 l_3)` built from ReLU pairs.
fn passthrough_decoder(channels: usize) -> Result<Mlp> {
    let inp = channels + 2;
    let mut l0 = Layer {
        in_dim: inp,
        out_dim: 16,
        weights: vec![0.0; 16 * inp],
        bias: vec![0.0; 16],
        activation: Activation::Relu,
    };
    for c in 0..4.min(channels) {
        l0.weights[(2 * c) * inp + c] = 1.0;
        l0.weights[(2 * c + 1) * inp + c] = -1.0;
    }
    let mut l1 = Layer {
        in_dim: 16,
        out_dim: 16,
        weights: vec![0.0; 256],
        bias: vec![0.0; 16],
        activation: Activation::Relu,
    };
    for k in 0..8 {
        l1.weights[k * 16 + k] = 1.0;
    }
    let mut l2 = Layer {
        in_dim: 16,
        out_dim: 3,
        weights: vec![0.0; 48],
        bias: vec![0.0; 3],
        activation: Activation::Sigmoid,
    };
    for c in 0..3 {
        l2.weights[c * 16 + 2 * c] = 1.0;
        l2.weights[c * 16 + 2 * c + 1] = -1.0;
        l2.weights[c * 16 + 6] = 0.5;
        l2.weights[c * 16 + 7] = -0.5;
    }
    Mlp::new(vec![l0, l1, l2])
}

fn skin_color(u: f64, v: f64) -> [f64; 3] {
    let checker = if ((8.0 * u).floor() as i64 + (8.0 * v).floor() as i64) % 2 == 0 {
        1.0
    } else {
        0.8
    };
    let shade = (0.75 + 0.25 * (1.0 - v)) * checker;
    [0.85 * shade, 0.62 * shade + 0.1 * u, 0.5 * shade]
}

fn ground_truth_textures(cfg: &TextureConfig) -> Result<TextureStack> {
    let mut t = TextureStack::new(cfg)?;
    let c = cfg.channels;
    let r = cfg.resolution;
    for y in 0..r {
        for x in 0..r {
            let (u, v) = ((x as f64 + 0.5) / r as f64, (y as f64 + 0.5) / r as f64);
            let col = skin_color(u, v);
            for k in 0..3 {
                t.diffuse.data[(y * r + x) * c + k] = logit(col[k]);
            }
        }
    }
    let rc = cfg.coarse_resolution;
    let k = cfg.dynamic_k;
    for y in 0..rc {
        for x in 0..rc {
            let uv = [(x as f64 + 0.5) / rc as f64, (y as f64 + 0.5) / rc as f64];
            let texel = y * rc + x;
            if c > 3 {
                // Brighter when seen from above.
                t.view.coeffs[(texel * c + 3) * 4 + 2] = -0.3;
                if k > 0 {
                    t.dynamic.basis[(texel * c + 3) * k] = -0.6 * bump(uv, [0.5, 0.68], 0.1);
                }
                if k > 2 {
                    t.dynamic.basis[(texel * c + 3) * k + 2] = -0.4 * bump(uv, [0.5, 0.43], 0.09);
                }
            }
            if k > 1 {
                let cheeks = bump(uv, [0.4, 0.6], 0.09) + bump(uv, [0.6, 0.6], 0.09);
                t.dynamic.basis[texel * c * k + 1] = 0.5 * cheeks;
            }
        }
    }
    Ok(t)
}

fn ground_truth_displacement(res: usize, n_cond: usize, amp: f64) -> DisplacementModel {
    let mut d = DisplacementModel::zeros(res, res, n_cond);
    for y in 0..res {
        for x in 0..res {
            let uv = [(x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64];
            let h = amp * bump(uv, [0.5, 0.55], 0.09)
                + 0.5 * amp * (bump(uv, [0.4, 0.6], 0.08) + bump(uv, [0.6, 0.6], 0.08));
            d.base.data[y * res + x] = ellipsoid_normal(&ellipsoid_point(uv[0], uv[1])) * h;
        }
    }
    d
}

/// Quaternion `(w, x, y, z)` rotating `+z` onto unit vector `n`.
fn quat_z_to(n: &Vec3) -> [f64; 4] {
    let z = Vec3::new(0.0, 0.0, 1.0);
    let d = z.dot(n);
    if d < -1.0 + 1e-12 {
        return [0.0, 1.0, 0.0, 0.0];
    }
    let a = z.cross(n);
    let q = [1.0 + d, a.x, a.y, a.z];
    let s = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / s)
}

fn push_hair(
    cloud: &mut GaussianCloud,
    rng: &mut ChaCha8Rng,
    p: Vec3,
    normal: Vec3,
    base: [f64; 3],
) {
    let stride = cloud.sh_stride();
    let mut sh = vec![0.0; stride];
    let tint = rng.random_range(-0.05..0.05);
    for c in 0..3 {
        sh[c] = (base[c] + tint - 0.5) / SH_C0;
    }
    for v in sh.iter_mut().skip(3) {
        *v = rng.random_range(-0.05..0.05);
    }
    let j = |rng: &mut ChaCha8Rng| -> f64 { rng.random_range(0.85..1.15) };
    let ls = Vec3::new(
        (0.013 * j(rng)).ln(),
        (0.013 * j(rng)).ln(),
        (0.006 * j(rng)).ln(),
    );
    cloud.push(p, quat_z_to(&normal), ls, logit(0.92), &sh);
}

fn ground_truth_hair(
    model: &HeadModel,
    canonical: &ExpressionParams,
    cfg: &SyntheticConfig,
) -> Result<GaussianCloud> {
    let posed = model.lbs_deform(canonical)?;
    let seeds = init_from_scalp(&posed, &model.scalp, cfg.n_hair, 0.0, 1, cfg.seed ^ 0x4a12)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4a13);
    let mut cloud = GaussianCloud::new(1);
    for p in &seeds.positions {
        let n = ellipsoid_normal(p);
        let off = rng.random_range(0.004..0.014);
        let shade = 0.8 + 0.4 * (p.y / RADII[1]).max(0.0);
        push_hair(
            &mut cloud,
            &mut rng,
            p + n * off,
            n,
            [0.36 * shade, 0.23 * shade, 0.13 * shade],
        );
    }
    for _ in 0..cfg.n_long_hair {
        let phi: f64 = rng.random_range(0.7..1.3) * std::f64::consts::PI;
        let y = rng.random_range(-0.14..0.02);
        let r = 0.1 + rng.random_range(0.0..0.012);
        let n = Vec3::new(phi.sin(), 0.0, phi.cos());
        push_hair(
            &mut cloud,
            &mut rng,
            Vec3::new(r * phi.sin(), y, r * phi.cos()),
            n,
            [0.3, 0.19, 0.1],
        );
    }
    Ok(cloud)
}

/// Field whose position offset is exactly `M psi` for the first three coefficients.
fn ground_truth_field(n: usize, sh_stride: usize, sway: f64, seed: u64) -> DeformationField {
    let mut f = DeformationField::new(n, sh_stride, 16, 8, 64, seed);
    let m = [
        [0.0, sway, 0.0],
        [-sway, 0.0, 0.4 * sway],
        [0.25 * sway, 0.0, 0.75 * sway],
    ];
    let layers = f.mlp.layers_mut();
    let inp = layers[0].in_dim;
    layers[0].weights.iter_mut().for_each(|w| *w = 0.0);
    layers[1].weights.iter_mut().for_each(|w| *w = 0.0);
    layers[0].bias.iter_mut().for_each(|b| *b = 0.0);
    layers[1].bias.iter_mut().for_each(|b| *b = 0.0);
    for k in 0..3 {
        layers[0].weights[(2 * k) * inp + k] = 1.0;
        layers[0].weights[(2 * k + 1) * inp + k] = -1.0;
    }
    let h = layers[1].in_dim;
    for k in 0..6 {
        layers[1].weights[k * h + k] = 1.0;
    }
    let out = &mut layers[2];
    for (a, row) in m.iter().enumerate() {
        for (k, coef) in row.iter().enumerate() {
            out.weights[a * h + 2 * k] = *coef;
            out.weights[a * h + 2 * k + 1] = -*coef;
        }
    }
    f
}

/// The ground-truth avatar of the fixture.
pub fn ground_truth_avatar(cfg: &SyntheticConfig) -> Result<Avatar> {
    let head = head_model(cfg.lat, cfg.lon)?;
    let canonical = ExpressionParams::zeros(&head);
    let n_cond = head.n_expr + 3 * head.joints.len();
    let hair = ground_truth_hair(&head, &canonical, cfg)?;
    let field = (cfg.sway != 0.0)
        .then(|| ground_truth_field(hair.len(), hair.sh_stride(), cfg.sway, cfg.seed));
    let mut a = Avatar {
        displacement: ground_truth_displacement(cfg.displacement_resolution, n_cond, cfg.bump),
        textures: ground_truth_textures(&cfg.texture)?,
        decoder: passthrough_decoder(cfg.texture.channels)?,
        hair: Some(hair),
        field,
        canonical,
        frame_transforms: Vec::new(),
        settings: RenderSettings::default(),
        subdivisions: cfg.subdivisions,
        head,
    };
    a.snap_f32();
    a.validate()?;
    Ok(a)
}

/// A trainable starting point sharing the ground truth's head model and settings:
/// zero displacement, zero latents, fresh decoder, no hair.
pub fn blank_avatar(gt: &Avatar, texture: &TextureConfig, seed: u64) -> Result<Avatar> {
    let d = &gt.displacement;
    let mut a = Avatar {
        head: gt.head.clone(),
        subdivisions: gt.subdivisions,
        displacement: DisplacementModel::zeros(d.base.width, d.base.height, d.basis.len()),
        textures: TextureStack::new(texture)?,
        decoder: default_decoder(texture.channels, seed),
        hair: None,
        field: None,
        canonical: gt.canonical.clone(),
        frame_transforms: Vec::new(),
        settings: gt.settings,
    };
    a.snap_f32();
    Ok(a)
}

/// Reference composite with a per-pixel depth test: Gaussians are alpha-blended
/// front to back by centre depth, only those in front of the mesh surface count,
/// and the head colour fills the remaining transmittance. Returns the image and the
/// visible hair alpha. Brute force over every Gaussian at every pixel.
pub fn render_occluded(
    cloud: &GaussianCloud,
    head: &ColorImage,
    mesh_depth: &ScalarImage,
    camera: &Camera,
    alpha_cutoff: f64,
) -> (ColorImage, ScalarImage) {
    let mut proj: Vec<Projected> = (0..cloud.len())
        .filter_map(|i| project_gaussian(cloud, i, camera, alpha_cutoff))
        .collect();
    proj.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<([f64; 3], f64)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (px, py) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            let (mut c, mut t) = ([0.0; 3], 1.0);
            for p in proj.iter().take_while(|p| p.depth < mesh_depth.data[i]) {
                let (dx, dy) = (px - p.mean[0], py - p.mean[1]);
                let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
                let a = p.opacity * (-0.5 * q).exp();
                if a < alpha_cutoff {
                    continue;
                }
                for k in 0..3 {
                    c[k] += p.color[k] * a * t;
                }
                t *= 1.0 - a;
                if t < TRANSMITTANCE_FLOOR {
                    break;
                }
            }
            let hc = head.data[i];
            ([0, 1, 2].map(|k| c[k] + t * hc[k]), 1.0 - t)
        })
        .collect();
    let image = ColorImage {
        width: w,
        height: h,
        data: pixels.iter().map(|p| p.0).collect(),
    };
    let alpha = ScalarImage {
        width: w,
        height: h,
        data: pixels.iter().map(|p| p.1).collect(),
    };
    (image, alpha)
}

/// Renders one supervised view of `avatar`.
pub fn render_record(
    avatar: &Avatar,
    rig: &crate::avatar::FaceRig,
    frame: usize,
    view: usize,
    params: &ExpressionParams,
    camera: &Camera,
    exact_occlusion: bool,
) -> Result<FrameRecord> {
    let f = avatar.render_frame(rig, params, camera)?;
    let (image, hair_mask) = match &f.hair {
        Some(h) if exact_occlusion => {
            let cutoff = avatar.settings.splat.alpha_cutoff;
            let (img, alpha) = render_occluded(
                &h.posed.cloud,
                &f.head.face.image,
                &f.head.raster.depth,
                camera,
                cutoff,
            );
            (img, MaskImage::from_threshold(&alpha, 0.5))
        }
        Some(h) => (f.image, MaskImage::from_threshold(&h.maps.hair_alpha, 0.5)),
        None => (
            f.image,
            MaskImage::filled(camera.width, camera.height, false),
        ),
    };
    Ok(FrameRecord {
        frame,
        view,
        camera: camera.clone(),
        params: params.clone(),
        image,
        head_image: f.head.face.image.clone(),
        hair_mask,
        coverage: f.head.raster.coverage(),
        depth: Some(f.head.raster.depth.clone()),
    })
}

/// Builds the ground truth and renders every frame from every camera.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticScene> {
    if cfg.n_views == 0 || cfg.n_frames == 0 || cfg.resolution == 0 {
        return param_err("synthetic scene needs views, frames and a resolution");
    }
    let mut avatar = ground_truth_avatar(cfg)?;
    let cameras = ring_cameras(cfg);
    let sequence = sequence(&avatar.head, cfg.n_frames);
    let rig = avatar.rig()?;
    avatar.frame_transforms = sequence
        .iter()
        .map(|p| avatar.hair_transform(&rig, p))
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(cfg.n_frames * cfg.n_views);
    for (f, p) in sequence.iter().enumerate() {
        for (v, cam) in cameras.iter().enumerate() {
            records.push(render_record(
                &avatar,
                &rig,
                f,
                v,
                p,
                cam,
                cfg.exact_occlusion,
            )?);
        }
    }
    Ok(SyntheticScene {
        config: *cfg,
        avatar,
        cameras,
        sequence,
        records,
    })
}
