//! Pinhole camera, z-buffer triangle rasterisation and screen-space normals.
//!
//! Pixel `(x, y)` samples the image plane at `(x + 0.5, y + 0.5)`. Triangle edges use
//! the top-left fill rule, so a pixel centre lying exactly on a shared edge belongs
//! to exactly one of the two triangles. Back faces are not culled.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::geometry::TriMesh;
use crate::imaging::{MaskImage, ScalarImage};

pub type Vec3 = Vector3<f64>;

pub const NO_FACE: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`; image `y` points along `-up`.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation =
            Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
            width,
            height,
            rotation,
            translation,
            near: 0.01,
            far: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return param_err("camera focal lengths must be positive");
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return param_err("camera clip planes must satisfy 0 < near < far");
        }
        if self.width == 0 || self.height == 0 {
            return param_err("camera image size must be non-zero");
        }
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity())
            .abs()
            .max();
        if err > 1e-9 {
            return param_err(format!("camera rotation not orthonormal (err {err:.3e})"));
        }
        Ok(())
    }

    #[inline]
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Screen position (pixels) of a camera-space point.
    #[inline]
    pub fn project_camera(&self, pc: &Vec3) -> [f64; 2] {
        [
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ]
    }

    /// Camera-space ray through a screen position, scaled so that `z = 1`.
    #[inline]
    pub fn ray_camera(&self, sx: f64, sy: f64) -> Vec3 {
        Vec3::new((sx - self.cx) / self.fx, (sy - self.cy) / self.fy, 1.0)
    }

    /// Unit world-space direction from the camera centre through pixel `(x, y)`.
    pub fn view_dir(&self, x: usize, y: usize) -> Vec3 {
        let r = self.ray_camera(x as f64 + 0.5, y as f64 + 0.5);
        (self.rotation.transpose() * r).normalize()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Per-pixel output of [`rasterize`].
#[derive(Clone, Debug, PartialEq)]
pub struct RasterBuffers {
    pub width: usize,
    pub height: usize,
    /// Camera-space z, `+inf` where nothing was hit.
    pub depth: ScalarImage,
    pub face: Vec<u32>,
    /// Perspective-correct barycentric coordinates of the hit.
    pub bary: Vec<[f64; 3]>,
    pub uv: Vec<[f64; 2]>,
}

impl RasterBuffers {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        RasterBuffers {
            width,
            height,
            depth: ScalarImage::filled(width, height, f64::INFINITY),
            face: vec![NO_FACE; n],
            bary: vec![[0.0; 3]; n],
            uv: vec![[0.0; 2]; n],
        }
    }

    pub fn coverage(&self) -> MaskImage {
        MaskImage {
            width: self.width,
            height: self.height,
            data: self.face.iter().map(|&f| f != NO_FACE).collect(),
        }
    }

    #[inline]
    pub fn covered(&self, i: usize) -> bool {
        self.face[i] != NO_FACE
    }
}

struct ScreenTri {
    face: u32,
    p: [[f64; 2]; 3],
    inv_z: [f64; 3],
    area: f64,
    ymin: usize,
    ymax: usize,
    xmin: usize,
    xmax: usize,
}

#[inline]
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Top-left rule for a positively oriented triangle: the interior lies on the left of
/// `a -> b`, so a left edge runs upward on screen and a top edge runs in `+x`.
#[inline]
fn is_top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

const BAND_ROWS: usize = 8;

/// Z-buffer rasterisation. Triangles with a vertex in front of the near plane and
/// zero-area projections are skipped. Ties in depth go to the lower face index, so
/// the result does not depend on the parallel schedule.
pub fn rasterize(mesh: &TriMesh, camera: &Camera) -> Result<RasterBuffers> {
    camera.validate()?;
    mesh.validate_indices()?;
    let (w, h) = (camera.width, camera.height);
    let cam_pts: Vec<Vec3> = mesh.vertices.iter().map(|v| camera.to_camera(v)).collect();

    let mut tris = Vec::new();
    for (fi, f) in mesh.faces.iter().enumerate() {
        let pc = [
            cam_pts[f[0] as usize],
            cam_pts[f[1] as usize],
            cam_pts[f[2] as usize],
        ];
        if pc.iter().any(|p| p.z < camera.near || p.z > camera.far) {
            continue;
        }
        let mut p = pc.map(|q| camera.project_camera(&q));
        let mut inv_z = pc.map(|q| 1.0 / q.z);
        let mut area = edge(p[0], p[1], p[2]);
        if area.abs() < 1e-12 {
            continue;
        }
        // Orientation is normalised here; barycentrics are re-mapped after the swap.
        let swapped = area < 0.0;
        if swapped {
            p.swap(1, 2);
            inv_z.swap(1, 2);
            area = -area;
        }
        let xs = [p[0][0], p[1][0], p[2][0]];
        let ys = [p[0][1], p[1][1], p[2][1]];
        let fmin = |v: [f64; 3]| v[0].min(v[1]).min(v[2]);
        let fmax = |v: [f64; 3]| v[0].max(v[1]).max(v[2]);
        let (x0, x1, y0, y1) = (fmin(xs), fmax(xs), fmin(ys), fmax(ys));
        if x1 < 0.0 || y1 < 0.0 || x0 > w as f64 || y0 > h as f64 {
            continue;
        }
        let xmin = (x0 - 0.5).ceil().max(0.0) as usize;
        let ymin = (y0 - 0.5).ceil().max(0.0) as usize;
        let xmax = ((x1 - 0.5).floor() as i64).min(w as i64 - 1);
        let ymax = ((y1 - 0.5).floor() as i64).min(h as i64 - 1);
        if xmax < xmin as i64 || ymax < ymin as i64 {
            continue;
        }
        tris.push((
            ScreenTri {
                face: fi as u32,
                p,
                inv_z,
                area,
                ymin,
                ymax: ymax as usize,
                xmin,
                xmax: xmax as usize,
            },
            swapped,
        ));
    }

    let n_bands = h.div_ceil(BAND_ROWS);
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); n_bands];
    for (ti, (t, _)) in tris.iter().enumerate() {
        for b in (t.ymin / BAND_ROWS)..=(t.ymax / BAND_ROWS) {
            bins[b].push(ti);
        }
    }

    let bands: Vec<Vec<(f64, u32, [f64; 3])>> = bins
        .par_iter()
        .enumerate()
        .map(|(b, list)| {
            let r0 = b * BAND_ROWS;
            let r1 = (r0 + BAND_ROWS).min(h);
            let mut buf = vec![(f64::INFINITY, NO_FACE, [0.0; 3]); (r1 - r0) * w];
            for &ti in list {
                let (t, swapped) = &tris[ti];
                let top_left = [
                    is_top_left(t.p[1], t.p[2]),
                    is_top_left(t.p[2], t.p[0]),
                    is_top_left(t.p[0], t.p[1]),
                ];
                for y in t.ymin.max(r0)..=t.ymax.min(r1 - 1) {
                    let py = y as f64 + 0.5;
                    for x in t.xmin..=t.xmax {
                        let q = [x as f64 + 0.5, py];
                        let e = [
                            edge(t.p[1], t.p[2], q),
                            edge(t.p[2], t.p[0], q),
                            edge(t.p[0], t.p[1], q),
                        ];
                        let inside = (0..3).all(|k| e[k] > 0.0 || (e[k] == 0.0 && top_left[k]));
                        if !inside {
                            continue;
                        }
                        let l = e.map(|v| v / t.area);
                        let s = l[0] * t.inv_z[0] + l[1] * t.inv_z[1] + l[2] * t.inv_z[2];
                        let z = 1.0 / s;
                        let slot = &mut buf[(y - r0) * w + x];
                        if z < slot.0 || (z == slot.0 && t.face < slot.1) {
                            let mut bary = [
                                l[0] * t.inv_z[0] * z,
                                l[1] * t.inv_z[1] * z,
                                l[2] * t.inv_z[2] * z,
                            ];
                            if *swapped {
                                bary.swap(1, 2);
                            }
                            *slot = (z, t.face, bary);
                        }
                    }
                }
            }
            buf
        })
        .collect();

    let mut out = RasterBuffers::empty(w, h);
    for (i, (z, face, bary)) in bands.into_iter().flatten().enumerate() {
        if face == NO_FACE {
            continue;
        }
        out.depth.data[i] = z;
        out.face[i] = face;
        out.bary[i] = bary;
        let f = mesh.faces[face as usize];
        let mut uv = [0.0; 2];
        for k in 0..3 {
            let t = mesh.uvs[f[k] as usize];
            uv[0] += bary[k] * t[0];
            uv[1] += bary[k] * t[1];
        }
        out.uv[i] = uv;
    }
    Ok(out)
}

/// Gradient of a loss on the rendered depth map with respect to world-space vertex
/// positions, holding the pixel-to-face assignment fixed.
///
/// The depth of pixel ray `r` (with `r.z = 1`) hitting the plane of face `f` moves by
/// `b_k (n . delta) / (n . r)` when vertex `k` of `f` moves by `delta`, where `b` are the
/// hit's barycentrics and `n` the (unnormalised) face normal in camera space.
pub fn depth_vertex_grads(
    mesh: &TriMesh,
    camera: &Camera,
    raster: &RasterBuffers,
    grad_depth: &[f64],
) -> Vec<Vec3> {
    let mut grads = vec![Vec3::zeros(); mesh.vertices.len()];
    let rt = camera.rotation.transpose();
    for y in 0..raster.height {
        for x in 0..raster.width {
            let i = y * raster.width + x;
            let g = grad_depth[i];
            if g == 0.0 || !raster.covered(i) {
                continue;
            }
            let f = mesh.faces[raster.face[i] as usize];
            let v: Vec<Vec3> = f
                .iter()
                .map(|&k| camera.to_camera(&mesh.vertices[k as usize]))
                .collect();
            let n = (v[1] - v[0]).cross(&(v[2] - v[0]));
            let r = camera.ray_camera(x as f64 + 0.5, y as f64 + 0.5);
            let denom = n.dot(&r);
            if denom.abs() < 1e-300 {
                continue;
            }
            let gw = rt * (n * (g / denom));
            for k in 0..3 {
                grads[f[k] as usize] += gw * raster.bary[i][k];
            }
        }
    }
    grads
}

/// Screen-space normals of a depth map with validity flags.
#[derive(Clone, Debug)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub normals: Vec<Vec3>,
    pub valid: Vec<bool>,
}

#[inline]
fn backproject(depth: &ScalarImage, camera: &Camera, x: usize, y: usize) -> Vec3 {
    camera.ray_camera(x as f64 + 0.5, y as f64 + 0.5) * depth.get(x, y)
}

fn normal_support(depth: &ScalarImage, x: usize, y: usize) -> bool {
    let (w, h) = depth.dims();
    if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
        return false;
    }
    [(x, y), (x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
        .iter()
        .all(|&(a, b)| depth.get(a, b).is_finite())
}

/// Camera-space unit normals from central differences of back-projected depth,
/// oriented toward the camera. Pixels whose 4-neighbourhood is incomplete are invalid.
pub fn screen_normals(depth: &ScalarImage, camera: &Camera) -> NormalMap {
    let (w, h) = depth.dims();
    let results: Vec<(Vec3, bool)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if !normal_support(depth, x, y) {
                return (Vec3::zeros(), false);
            }
            let tx = backproject(depth, camera, x + 1, y) - backproject(depth, camera, x - 1, y);
            let ty = backproject(depth, camera, x, y + 1) - backproject(depth, camera, x, y - 1);
            let m = ty.cross(&tx);
            let len = m.norm();
            if len < 1e-300 {
                return (Vec3::zeros(), false);
            }
            (m / len, true)
        })
        .collect();
    let (normals, valid) = results.into_iter().unzip();
    NormalMap {
        width: w,
        height: h,
        normals,
        valid,
    }
}

/// Reverse-mode companion of [`screen_normals`]: maps per-pixel normal gradients to
/// depth gradients.
pub fn screen_normals_backward(
    depth: &ScalarImage,
    camera: &Camera,
    grad_normals: &[Vec3],
) -> Vec<f64> {
    let (w, h) = depth.dims();
    let mut grad = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = grad_normals[y * w + x];
            if g == Vec3::zeros() || !normal_support(depth, x, y) {
                continue;
            }
            let tx = backproject(depth, camera, x + 1, y) - backproject(depth, camera, x - 1, y);
            let ty = backproject(depth, camera, x, y + 1) - backproject(depth, camera, x, y - 1);
            let m = ty.cross(&tx);
            let len = m.norm();
            if len < 1e-300 {
                continue;
            }
            let n = m / len;
            let gm = (g - n * n.dot(&g)) / len;
            let g_ty = tx.cross(&gm);
            let g_tx = gm.cross(&ty);
            let mut add = |px: usize, py: usize, gp: Vec3| {
                grad[py * w + px] += gp.dot(&camera.ray_camera(px as f64 + 0.5, py as f64 + 0.5));
            };
            add(x + 1, y, g_tx);
            add(x - 1, y, -g_tx);
            add(x, y + 1, g_ty);
            add(x, y - 1, -g_ty);
        }
    }
    grad
}
