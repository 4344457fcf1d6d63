//! Anisotropic 3D Gaussians: storage, spherical-harmonic colour, projection,
//! tile-based compositing and its reverse pass, scalp initialization, deformation
//! and PLY interchange.

mod deform;
mod init;
mod ply;
mod project;
mod render;

pub use deform::{apply_rigid, deform_cloud, DeformTrace, DeformationField, FieldGrads};
pub use init::{init_from_scalp, prune_transparent};
pub use ply::{read_ply, write_ply};
pub use project::{project_gaussian, Projected};
pub use render::{
    render_splats, splat_backward, DepthMode, SplatBuffers, SplatForward, SplatOptions,
    TRANSMITTANCE_FLOOR,
};

use crate::error::{param_err, Result};
use crate::raster::Vec3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of SH coefficients per colour channel for a degree.
pub const fn sh_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Real SH basis values (up to degree 3) and their gradients w.r.t. `d`.
pub fn sh_basis(degree: usize, d: &Vec3) -> ([f64; 16], [[f64; 3]; 16]) {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut v = [0.0; 16];
    let mut g = [[0.0; 3]; 16];
    v[0] = SH_C0;
    if degree >= 1 {
        v[1] = -SH_C1 * y;
        v[2] = SH_C1 * z;
        v[3] = -SH_C1 * x;
        g[1] = [0.0, -SH_C1, 0.0];
        g[2] = [0.0, 0.0, SH_C1];
        g[3] = [-SH_C1, 0.0, 0.0];
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        v[4] = SH_C2[0] * x * y;
        v[5] = SH_C2[1] * y * z;
        v[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        v[7] = SH_C2[3] * x * z;
        v[8] = SH_C2[4] * (xx - yy);
        g[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
        g[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
        g[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
        g[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
        g[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        v[9] = SH_C3[0] * y * (3.0 * xx - yy);
        v[10] = SH_C3[1] * x * y * z;
        v[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
        v[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        v[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
        v[14] = SH_C3[5] * z * (xx - yy);
        v[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        g[9] = [6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0].map(|t| t * SH_C3[0]);
        g[10] = [y * z, x * z, x * y].map(|t| t * SH_C3[1]);
        g[11] = [-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z].map(|t| t * SH_C3[2]);
        g[12] = [-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy].map(|t| t * SH_C3[3]);
        g[13] = [4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z].map(|t| t * SH_C3[4]);
        g[14] = [2.0 * x * z, -2.0 * y * z, xx - yy].map(|t| t * SH_C3[5]);
        g[15] = [3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0].map(|t| t * SH_C3[6]);
    }
    (v, g)
}

/// `clamp(0.5 + sum_k c_k Y_k(d), 0, 1)` per channel; `coeffs` is `[k][rgb]`.
pub fn eval_sh(degree: usize, coeffs: &[f64], d: &Vec3) -> [f64; 3] {
    let (y, _) = sh_basis(degree, d);
    let mut c = [0.5; 3];
    for (k, yk) in y.iter().take(sh_count(degree)).enumerate() {
        for ch in 0..3 {
            c[ch] += yk * coeffs[k * 3 + ch];
        }
    }
    c.map(|v| v.clamp(0.0, 1.0))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Structure-of-arrays Gaussian cloud. Rotations are `(w, x, y, z)` quaternions,
/// scales are natural logs, opacities are logits, SH is `[gaussian][k][rgb]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub sh_degree: usize,
    pub positions: Vec<Vec3>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<Vec3>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Self {
        GaussianCloud {
            sh_degree,
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sh_stride(&self) -> usize {
        3 * sh_count(self.sh_degree)
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh[i * s..(i + 1) * s]
    }

    pub fn push(
        &mut self,
        position: Vec3,
        rotation: [f64; 4],
        log_scale: Vec3,
        opacity_logit: f64,
        sh: &[f64],
    ) {
        assert_eq!(sh.len(), self.sh_stride(), "SH coefficient count");
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        self.sh.extend_from_slice(sh);
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.sh_degree > 3 {
            return param_err("SH degree must be at most 3");
        }
        if self.rotations.len() != n
            || self.log_scales.len() != n
            || self.opacity_logits.len() != n
            || self.sh.len() != n * self.sh_stride()
        {
            return param_err("Gaussian attribute arrays have inconsistent lengths");
        }
        let finite = self
            .positions
            .iter()
            .chain(&self.log_scales)
            .all(|v| v.iter().all(|x| x.is_finite()))
            && self
                .rotations
                .iter()
                .flatten()
                .chain(&self.opacity_logits)
                .chain(&self.sh)
                .all(|x| x.is_finite());
        if !finite {
            return param_err("Gaussian cloud has non-finite values");
        }
        if self
            .rotations
            .iter()
            .any(|q| q.iter().map(|v| v * v).sum::<f64>() < 1e-24)
        {
            return param_err("Gaussian rotation quaternion is zero");
        }
        Ok(())
    }

    pub fn renormalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            q.iter_mut().for_each(|v| *v /= n);
        }
    }

    /// Hash of every parameter bit, used to pair forward and reverse passes.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.sh_degree as u64;
        let mut eat = |v: f64| {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        self.positions
            .iter()
            .chain(&self.log_scales)
            .flat_map(|v| v.iter())
            .for_each(|&v| eat(v));
        self.rotations
            .iter()
            .flatten()
            .chain(&self.opacity_logits)
            .chain(&self.sh)
            .for_each(|&v| eat(v));
        h
    }

    /// New cloud with Gaussians taken in `order`.
    pub fn select(&self, order: &[usize]) -> GaussianCloud {
        let mut out = GaussianCloud::new(self.sh_degree);
        for &i in order {
            out.push(
                self.positions[i],
                self.rotations[i],
                self.log_scales[i],
                self.opacity_logits[i],
                self.sh_of(i),
            );
        }
        out
    }

    /// Centre and radius of the axis-aligned bounding box's circumscribed sphere.
    pub fn bounding_sphere(&self) -> (Vec3, f64) {
        if self.is_empty() {
            return (Vec3::zeros(), 0.0);
        }
        let mut lo = self.positions[0];
        let mut hi = lo;
        for p in &self.positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        ((lo + hi) * 0.5, (hi - lo).norm() * 0.5)
    }

    pub fn snap_f32(&mut self) {
        use crate::io::{snap_f32, snap_slice};
        for v in self.positions.iter_mut().chain(self.log_scales.iter_mut()) {
            v.iter_mut().for_each(|x| *x = snap_f32(*x));
        }
        self.rotations.iter_mut().for_each(|q| snap_slice(q));
        snap_slice(&mut self.opacity_logits);
        snap_slice(&mut self.sh);
    }
}

/// Per-Gaussian offsets (or gradients) with the same layout as [`GaussianCloud`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDelta {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<Vec3>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
}

/// Gradients of a scalar loss w.r.t. every cloud parameter.
pub type CloudGrads = GaussianDelta;

impl GaussianDelta {
    pub fn zeros(n: usize, sh_stride: usize) -> Self {
        GaussianDelta {
            positions: vec![Vec3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![Vec3::zeros(); n],
            opacity_logits: vec![0.0; n],
            sh: vec![0.0; n * sh_stride],
        }
    }

    pub fn zeros_like(cloud: &GaussianCloud) -> Self {
        Self::zeros(cloud.len(), cloud.sh_stride())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Values per Gaussian in the flat layout `x(3) r(4) s(3) o(1) sh(..)`.
    pub fn row_len(&self) -> usize {
        11 + if self.is_empty() {
            0
        } else {
            self.sh.len() / self.len()
        }
    }

    pub fn add_assign(&mut self, other: &GaussianDelta) {
        self.positions
            .iter_mut()
            .zip(&other.positions)
            .for_each(|(a, b)| *a += b);
        self.log_scales
            .iter_mut()
            .zip(&other.log_scales)
            .for_each(|(a, b)| *a += b);
        for (a, b) in self.rotations.iter_mut().zip(&other.rotations) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.opacity_logits
            .iter_mut()
            .zip(&other.opacity_logits)
            .for_each(|(a, b)| *a += b);
        self.sh.iter_mut().zip(&other.sh).for_each(|(a, b)| *a += b);
    }

    pub fn is_zero(&self) -> bool {
        self.positions
            .iter()
            .chain(&self.log_scales)
            .all(|v| v.iter().all(|x| *x == 0.0))
            && self
                .rotations
                .iter()
                .flatten()
                .chain(&self.opacity_logits)
                .chain(&self.sh)
                .all(|x| *x == 0.0)
    }
}

/// Quaternion `(w, x, y, z)` to rotation matrix, assuming unit length.
pub fn quat_to_matrix(q: &[f64; 4]) -> nalgebra::Matrix3<f64> {
    let [w, x, y, z] = *q;
    nalgebra::Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Hamilton product `a * b` of `(w, x, y, z)` quaternions.
pub fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}
