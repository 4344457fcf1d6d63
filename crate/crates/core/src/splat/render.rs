use nalgebra::{Matrix2, Matrix3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::project::{project_gaussian, Projected};
use super::{sh_basis, sh_count, CloudGrads, GaussianCloud, GaussianDelta};
use crate::error::{param_err, Error, Result};
use crate::imaging::{ColorImage, ScalarImage};
use crate::raster::{Camera, Vec3};

/// A ray stops once its remaining transmittance drops below this value.
pub const TRANSMITTANCE_FLOOR: f64 = 1e-4;
const TILE: usize = 16;
const ACC_DEPTH_EPS: f64 = 1e-6;

/// Which hair depth feeds the mesh occlusion test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// Depth of the first Gaussian whose evaluated opacity reaches the threshold.
    NearZ,
    /// Alpha-weighted mean depth of the accumulated Gaussians.
    Accumulated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplatOptions {
    pub nearz_threshold: f64,
    /// Camera-z gap (scene units) to the next Gaussian that halts accumulation.
    pub early_stop_gap: f64,
    pub alpha_cutoff: f64,
    pub depth_mode: DepthMode,
    pub early_stop: bool,
}

impl Default for SplatOptions {
    fn default() -> Self {
        SplatOptions {
            nearz_threshold: 0.05,
            early_stop_gap: 0.1,
            alpha_cutoff: 1.0 / 255.0,
            depth_mode: DepthMode::NearZ,
            early_stop: true,
        }
    }
}

impl SplatOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.nearz_threshold > 0.0 && self.nearz_threshold < 1.0) {
            return param_err("near-z opacity threshold must be in (0, 1)");
        }
        if !(self.early_stop_gap > 0.0) {
            return param_err("early-stop gap must be positive");
        }
        if !(self.alpha_cutoff > 0.0 && self.alpha_cutoff < 1.0) {
            return param_err("alpha cutoff must be in (0, 1)");
        }
        Ok(())
    }

    /// Gap set to half the diameter of the cloud's bounding sphere.
    pub fn with_gap_from(mut self, cloud: &GaussianCloud) -> Self {
        let (_, r) = cloud.bounding_sphere();
        if r > 0.0 {
            self.early_stop_gap = r;
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplatBuffers {
    pub width: usize,
    pub height: usize,
    /// Alpha-premultiplied colour `sum c_i a_i T_i`.
    pub color: ColorImage,
    pub alpha: ScalarImage,
    /// `+inf` where no Gaussian reaches the threshold.
    pub nearz: ScalarImage,
    /// `+inf` where nothing was accumulated.
    pub accum_depth: ScalarImage,
}

impl SplatBuffers {
    pub fn hair_depth(&self, mode: DepthMode) -> &ScalarImage {
        match mode {
            DepthMode::NearZ => &self.nearz,
            DepthMode::Accumulated => &self.accum_depth,
        }
    }
}

/// Buffers plus the state [`splat_backward`] needs.
#[derive(Clone, Debug)]
pub struct SplatForward {
    pub buffers: SplatBuffers,
    opts: SplatOptions,
    camera: Camera,
    fingerprint: u64,
    projected: Vec<Option<Projected>>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

impl SplatForward {
    pub fn options(&self) -> &SplatOptions {
        &self.opts
    }

    /// Gaussians that survived culling, in compositing order.
    pub fn visible_count(&self) -> usize {
        self.projected.iter().filter(|p| p.is_some()).count()
    }
}

struct Contrib {
    slot: u32,
    alpha: f64,
    trans: f64,
    dx: f64,
    dy: f64,
}

struct PixelOut {
    color: [f64; 3],
    alpha: f64,
    nearz: f64,
    accum_depth: f64,
}

/// Front-to-back compositing of one pixel over a depth-sorted list.
fn shade(
    list: &[u32],
    proj: &[Option<Projected>],
    px: f64,
    py: f64,
    opts: &SplatOptions,
    mut record: Option<&mut Vec<Contrib>>,
) -> PixelOut {
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut depth_sum = 0.0;
    let mut nearz = f64::INFINITY;
    let mut last_depth: Option<f64> = None;
    let mut stopped = false;
    for (slot, &g) in list.iter().enumerate() {
        let p = proj[g as usize]
            .as_ref()
            .expect("binned Gaussians are projected");
        let dx = px - p.mean[0];
        let dy = py - p.mean[1];
        let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
        let alpha = p.opacity * (-0.5 * q).exp();
        if alpha < opts.alpha_cutoff {
            continue;
        }
        if nearz.is_infinite() && alpha >= opts.nearz_threshold {
            nearz = p.depth;
        }
        if !stopped {
            if let Some(ld) = last_depth {
                if opts.early_stop && p.depth - ld > opts.early_stop_gap {
                    stopped = true;
                }
            }
        }
        if stopped {
            if nearz.is_finite() {
                break;
            }
            continue;
        }
        let w = alpha * t;
        for c in 0..3 {
            color[c] += w * p.color[c];
        }
        depth_sum += w * p.depth;
        if let Some(r) = record.as_deref_mut() {
            r.push(Contrib {
                slot: slot as u32,
                alpha,
                trans: t,
                dx,
                dy,
            });
        }
        t *= 1.0 - alpha;
        last_depth = Some(p.depth);
        if t < TRANSMITTANCE_FLOOR {
            stopped = true;
            if nearz.is_finite() {
                break;
            }
        }
    }
    let alpha = 1.0 - t;
    let accum_depth = if last_depth.is_some() {
        depth_sum / alpha.max(ACC_DEPTH_EPS)
    } else {
        f64::INFINITY
    };
    PixelOut {
        color,
        alpha,
        nearz,
        accum_depth,
    }
}

/// Composites the cloud into `camera`. Gaussians are sorted globally by camera z
/// (index breaks ties) and binned into 16x16 pixel tiles.
pub fn render_splats(
    cloud: &GaussianCloud,
    camera: &Camera,
    opts: &SplatOptions,
) -> Result<SplatForward> {
    cloud.validate()?;
    camera.validate()?;
    opts.validate()?;
    let (w, h) = (camera.width, camera.height);
    let projected: Vec<Option<Projected>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| project_gaussian(cloud, i, camera, opts.alpha_cutoff))
        .collect();
    let mut order: Vec<u32> = (0..cloud.len() as u32)
        .filter(|&i| projected[i as usize].is_some())
        .collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (
            projected[a as usize].unwrap().depth,
            projected[b as usize].unwrap().depth,
        );
        da.total_cmp(&db).then(a.cmp(&b))
    });
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &g in &order {
        let p = projected[g as usize].as_ref().expect("filtered");
        // Pixel x is sampled at x + 0.5.
        let x0 = (p.mean[0] - p.radius - 0.5).ceil().max(0.0);
        let x1 = (p.mean[0] + p.radius - 0.5).floor().min(w as f64 - 1.0);
        let y0 = (p.mean[1] - p.radius - 0.5).ceil().max(0.0);
        let y1 = (p.mean[1] + p.radius - 0.5).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for ty in (y0 as usize / TILE)..=(y1 as usize / TILE) {
            for tx in (x0 as usize / TILE)..=(x1 as usize / TILE) {
                tiles[ty * tiles_x + tx].push(g);
            }
        }
    }
    let tile_out: Vec<Vec<(usize, PixelOut)>> = (0..tiles.len())
        .into_par_iter()
        .map(|ti| {
            let (tx, ty) = (ti % tiles_x, ti / tiles_x);
            let mut out = Vec::with_capacity(TILE * TILE);
            for y in ty * TILE..((ty + 1) * TILE).min(h) {
                for x in tx * TILE..((tx + 1) * TILE).min(w) {
                    out.push((
                        y * w + x,
                        shade(
                            &tiles[ti],
                            &projected,
                            x as f64 + 0.5,
                            y as f64 + 0.5,
                            opts,
                            None,
                        ),
                    ));
                }
            }
            out
        })
        .collect();
    let mut buffers = SplatBuffers {
        width: w,
        height: h,
        color: ColorImage::new(w, h),
        alpha: ScalarImage::filled(w, h, 0.0),
        nearz: ScalarImage::filled(w, h, f64::INFINITY),
        accum_depth: ScalarImage::filled(w, h, f64::INFINITY),
    };
    for (i, o) in tile_out.into_iter().flatten() {
        buffers.color.data[i] = o.color;
        buffers.alpha.data[i] = o.alpha;
        buffers.nearz.data[i] = o.nearz;
        buffers.accum_depth.data[i] = o.accum_depth;
    }
    Ok(SplatForward {
        buffers,
        opts: *opts,
        camera: camera.clone(),
        fingerprint: cloud.fingerprint(),
        projected,
        tiles,
        tiles_x,
    })
}

/// Screen-space gradient slots per Gaussian.
const MEAN_X: usize = 0;
const MEAN_Y: usize = 1;
const CONIC_A: usize = 2;
const CONIC_B: usize = 3;
const CONIC_C: usize = 4;
const COLOR: usize = 5;
const OPACITY: usize = 8;
const SLOTS: usize = 9;

/// Reverse pass of [`render_splats`] for `dL/dcolor` and `dL/dalpha`. Culling, the
/// alpha cutoff, early stopping and the transmittance floor are treated as fixed.
pub fn splat_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    opts: &SplatOptions,
    fwd: &SplatForward,
    grad_color: &[[f64; 3]],
    grad_alpha: &[f64],
) -> Result<CloudGrads> {
    if *opts != fwd.opts || *camera != fwd.camera || cloud.fingerprint() != fwd.fingerprint {
        return Err(Error::Contract(
            "splat backward inputs differ from the forward pass".into(),
        ));
    }
    let (w, h) = (camera.width, camera.height);
    if grad_color.len() != w * h || grad_alpha.len() != w * h {
        return param_err("splat gradient images must match the camera size");
    }
    let tiles_x = fwd.tiles_x;
    let partials: Vec<Vec<[f64; SLOTS]>> = (0..fwd.tiles.len())
        .into_par_iter()
        .map(|ti| {
            let list = &fwd.tiles[ti];
            let mut acc = vec![[0.0; SLOTS]; list.len()];
            if list.is_empty() {
                return acc;
            }
            let (tx, ty) = (ti % tiles_x, ti / tiles_x);
            let mut rec = Vec::new();
            for y in ty * TILE..((ty + 1) * TILE).min(h) {
                for x in tx * TILE..((tx + 1) * TILE).min(w) {
                    let i = y * w + x;
                    let gc = grad_color[i];
                    let ga = grad_alpha[i];
                    if gc == [0.0; 3] && ga == 0.0 {
                        continue;
                    }
                    rec.clear();
                    shade(
                        list,
                        &fwd.projected,
                        x as f64 + 0.5,
                        y as f64 + 0.5,
                        opts,
                        Some(&mut rec),
                    );
                    // Colour and alpha composited behind the current Gaussian.
                    let mut behind = [0.0; 3];
                    let mut behind_a = 0.0;
                    for c in rec.iter().rev() {
                        let p = fwd.projected[list[c.slot as usize] as usize]
                            .as_ref()
                            .expect("binned");
                        let a = &mut acc[c.slot as usize];
                        let mut d_alpha = ga * c.trans * (1.0 - behind_a);
                        for ch in 0..3 {
                            d_alpha += gc[ch] * c.trans * (p.color[ch] - behind[ch]);
                            a[COLOR + ch] += gc[ch] * c.alpha * c.trans;
                            behind[ch] = p.color[ch] * c.alpha + (1.0 - c.alpha) * behind[ch];
                        }
                        behind_a = c.alpha + (1.0 - c.alpha) * behind_a;
                        // alpha = o exp(-q/2)
                        a[OPACITY] += d_alpha * c.alpha / p.opacity;
                        let d_q = -0.5 * c.alpha * d_alpha;
                        a[CONIC_A] += d_q * c.dx * c.dx;
                        a[CONIC_B] += d_q * 2.0 * c.dx * c.dy;
                        a[CONIC_C] += d_q * c.dy * c.dy;
                        a[MEAN_X] -= d_q * 2.0 * (p.conic[0] * c.dx + p.conic[1] * c.dy);
                        a[MEAN_Y] -= d_q * 2.0 * (p.conic[1] * c.dx + p.conic[2] * c.dy);
                    }
                }
            }
            acc
        })
        .collect();
    let mut screen = vec![[0.0; SLOTS]; cloud.len()];
    for (list, part) in fwd.tiles.iter().zip(&partials) {
        for (&g, p) in list.iter().zip(part) {
            let s = &mut screen[g as usize];
            s.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
    }
    let stride = cloud.sh_stride();
    let per: Vec<Option<GaussianGrad>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            fwd.projected[i]
                .as_ref()
                .map(|p| chain_to_params(cloud, i, p, camera, &screen[i]))
        })
        .collect();
    let mut grads = GaussianDelta::zeros(cloud.len(), stride);
    for (i, g) in per.into_iter().enumerate() {
        if let Some(g) = g {
            grads.positions[i] = g.position;
            grads.rotations[i] = g.rotation;
            grads.log_scales[i] = g.log_scale;
            grads.opacity_logits[i] = g.opacity_logit;
            grads.sh[i * stride..(i + 1) * stride].copy_from_slice(&g.sh);
        }
    }
    Ok(grads)
}

struct GaussianGrad {
    position: Vec3,
    rotation: [f64; 4],
    log_scale: Vec3,
    opacity_logit: f64,
    sh: Vec<f64>,
}

fn chain_to_params(
    cloud: &GaussianCloud,
    i: usize,
    p: &Projected,
    camera: &Camera,
    s: &[f64; SLOTS],
) -> GaussianGrad {
    let deg = cloud.sh_degree;
    let coeffs = cloud.sh_of(i);
    let nk = sh_count(deg);

    // Colour -> SH coefficients and view direction; clamped channels pass nothing.
    let (basis, basis_grad) = sh_basis(deg, &p.dir);
    let mut sh = vec![0.0; 3 * nk];
    let mut d_dir = Vec3::zeros();
    for ch in 0..3 {
        let raw: f64 = 0.5 + (0..nk).map(|k| basis[k] * coeffs[k * 3 + ch]).sum::<f64>();
        if !(raw > 0.0 && raw < 1.0) {
            continue;
        }
        let g = s[COLOR + ch];
        for k in 0..nk {
            sh[k * 3 + ch] = g * basis[k];
            d_dir += Vec3::from(basis_grad[k]) * (g * coeffs[k * 3 + ch]);
        }
    }
    let mut d_pos = (d_dir - p.dir * p.dir.dot(&d_dir)) / p.dir_len;

    let sig = p.opacity;
    let opacity_logit = s[OPACITY] * sig * (1.0 - sig);

    // Conic -> 2D covariance -> 3D covariance and the projection Jacobian.
    let k = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let gk = Matrix2::new(s[CONIC_A], 0.5 * s[CONIC_B], 0.5 * s[CONIC_B], s[CONIC_C]);
    let d_cov = -(k * gk * k);
    let d_sigma3 = p.jw.transpose() * d_cov * p.jw;
    let d_jw = 2.0 * d_cov * p.jw * p.sigma3;
    let d_j = d_jw * camera.rotation.transpose();

    let (fx, fy) = (camera.fx, camera.fy);
    let (tx, ty, tz) = (p.cam.x, p.cam.y, p.cam.z);
    let (tz2, tz3) = (tz * tz, tz * tz * tz);
    let (gmx, gmy) = (s[MEAN_X], s[MEAN_Y]);
    let d_cam = Vec3::new(
        gmx * fx / tz - d_j[(0, 2)] * fx / tz2,
        gmy * fy / tz - d_j[(1, 2)] * fy / tz2,
        -gmx * fx * tx / tz2
            - gmy * fy * ty / tz2
            - d_j[(0, 0)] * fx / tz2
            - d_j[(1, 1)] * fy / tz2
            + d_j[(0, 2)] * 2.0 * fx * tx / tz3
            + d_j[(1, 2)] * 2.0 * fy * ty / tz3,
    );
    d_pos += camera.rotation.transpose() * d_cam;

    // Sigma = M M^T with M = R diag(scale).
    let m = p.rot * Matrix3::from_diagonal(&p.scale);
    let d_m = 2.0 * d_sigma3 * m;
    let mut log_scale = Vec3::zeros();
    let mut d_r = Matrix3::zeros();
    for c in 0..3 {
        let mut ds = 0.0;
        for r in 0..3 {
            d_r[(r, c)] = d_m[(r, c)] * p.scale[c];
            ds += d_m[(r, c)] * p.rot[(r, c)];
        }
        log_scale[c] = ds * p.scale[c];
    }
    let rotation = quat_backward(&p.unit_q, p.q_norm, &d_r);
    GaussianGrad {
        position: d_pos,
        rotation,
        log_scale,
        opacity_logit,
        sh,
    }
}

/// Gradient w.r.t. a stored (possibly unnormalized) quaternion given `dL/dR`.
pub(crate) fn quat_backward(q: &[f64; 4], norm: f64, g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let gg = |r: usize, c: usize| g[(r, c)];
    let dw = 2.0
        * (-z * gg(0, 1) + y * gg(0, 2) + z * gg(1, 0) - x * gg(1, 2) - y * gg(2, 0)
            + x * gg(2, 1));
    let dx = 2.0
        * (y * gg(0, 1) + z * gg(0, 2) + y * gg(1, 0) - 2.0 * x * gg(1, 1) - w * gg(1, 2)
            + z * gg(2, 0)
            + w * gg(2, 1)
            - 2.0 * x * gg(2, 2));
    let dy = 2.0
        * (-2.0 * y * gg(0, 0) + x * gg(0, 1) + w * gg(0, 2) + x * gg(1, 0) + z * gg(1, 2)
            - w * gg(2, 0)
            + z * gg(2, 1)
            - 2.0 * y * gg(2, 2));
    let dz = 2.0
        * (-2.0 * z * gg(0, 0) - w * gg(0, 1) + x * gg(0, 2) + w * gg(1, 0) - 2.0 * z * gg(1, 1)
            + y * gg(1, 2)
            + x * gg(2, 0)
            + y * gg(2, 1));
    let d = [dw, dx, dy, dz];
    let radial: f64 = d.iter().zip(q).map(|(a, b)| a * b).sum();
    [0, 1, 2, 3].map(|k| (d[k] - q[k] * radial) / norm)
}
