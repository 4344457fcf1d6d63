//! Training losses with analytic gradients.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use std::num::NonZero;

use crate::error::{param_err, Error, Result};
use crate::geometry::TriMesh;
use crate::imaging::{check_dims, ColorImage, MaskImage, ScalarImage};
use crate::optim::morph::{distance_transform, erode};
use crate::raster::{screen_normals, screen_normals_backward, Camera, Vec3};
use crate::splat::GaussianDelta;

/// Default depth-agreement threshold of the geometric losses.
pub const DEPTH_DELTA: f64 = 0.005;
/// Erosion radius (pixels) of the solid-hair mask.
pub const SOLID_ERODE_RADIUS: f64 = 5.0;

/// Value and image gradient of a loss on a colour render.
#[derive(Clone, Debug)]
pub struct ImageLoss {
    pub value: f64,
    pub grad: Vec<[f64; 3]>,
    /// The mask selected no pixels; the value and gradient are zero.
    pub empty: bool,
}

/// Masked mean squared error over pixels and channels.
pub fn photometric(
    target: &ColorImage,
    render: &ColorImage,
    mask: &MaskImage,
) -> Result<ImageLoss> {
    check_dims(target.dims(), render.dims(), "photometric images")?;
    check_dims(target.dims(), mask.dims(), "photometric mask")?;
    let n = mask.count();
    let mut grad = vec![[0.0; 3]; target.data.len()];
    if n == 0 {
        return Ok(ImageLoss {
            value: 0.0,
            grad,
            empty: true,
        });
    }
    let inv = 1.0 / (3 * n) as f64;
    let mut value = 0.0;
    for i in 0..target.data.len() {
        if mask.data[i] {
            for c in 0..3 {
                let d = render.data[i][c] - target.data[i][c];
                value += d * d * inv;
                grad[i][c] = 2.0 * d * inv;
            }
        }
    }
    Ok(ImageLoss {
        value,
        grad,
        empty: false,
    })
}

/// `1 - SSIM` over the mask, with gradient w.r.t. `render`.
pub fn ssim_loss(target: &ColorImage, render: &ColorImage, mask: &MaskImage) -> Result<ImageLoss> {
    if mask.count() == 0 {
        check_dims(target.dims(), render.dims(), "ssim images")?;
        return Ok(ImageLoss {
            value: 0.0,
            grad: vec![[0.0; 3]; target.data.len()],
            empty: true,
        });
    }
    let (s, g) = super::metrics::ssim_with_grad(target, render, Some(mask), true)?;
    let grad = g
        .expect("gradient requested")
        .into_iter()
        .map(|v| v.map(|x| -x))
        .collect();
    Ok(ImageLoss {
        value: 1.0 - s,
        grad,
        empty: false,
    })
}

/// Depth and normal agreement terms against a target depth map.
#[derive(Clone, Debug)]
pub struct GeometricLoss {
    /// Mean absolute depth error over agreeing pixels.
    pub depth: f64,
    /// Mean normal-difference norm over agreeing pixels with valid normals.
    pub normal: f64,
    pub depth_pixels: usize,
    pub normal_pixels: usize,
    /// Gradient of `w_d * depth + w_n * normal` w.r.t. the rendered depth.
    pub grad: Vec<f64>,
}

/// Geometric losses on pixels where both depths are finite and differ by less than
/// `delta`. Gradients flow only into `render`.
pub fn geometric(
    target: &ScalarImage,
    render: &ScalarImage,
    camera: &Camera,
    delta: f64,
    weights: [f64; 2],
) -> Result<GeometricLoss> {
    check_dims(target.dims(), render.dims(), "depth maps")?;
    check_dims(
        target.dims(),
        (camera.width, camera.height),
        "depth map vs camera",
    )?;
    let m: Vec<bool> = target
        .data
        .iter()
        .zip(&render.data)
        .map(|(a, b)| a.is_finite() && b.is_finite() && (a - b).abs() < delta)
        .collect();
    let nd = m.iter().filter(|&&b| b).count();
    let mut grad = vec![0.0; target.data.len()];
    let mut depth = 0.0;
    if nd > 0 {
        for i in 0..m.len() {
            if m[i] {
                let d = render.data[i] - target.data[i];
                depth += d.abs() / nd as f64;
                if d != 0.0 {
                    grad[i] += weights[0] * d.signum() / nd as f64;
                }
            }
        }
    }
    let nt = screen_normals(target, camera);
    let nr = screen_normals(render, camera);
    let sel: Vec<bool> = (0..m.len())
        .map(|i| m[i] && nt.valid[i] && nr.valid[i])
        .collect();
    let nn = sel.iter().filter(|&&b| b).count();
    let mut normal = 0.0;
    if nn > 0 {
        let mut gn = vec![Vec3::zeros(); m.len()];
        for i in 0..m.len() {
            if sel[i] {
                let d = nr.normals[i] - nt.normals[i];
                let len = d.norm();
                normal += len / nn as f64;
                if len > 0.0 {
                    gn[i] = d * (weights[1] / (nn as f64 * len));
                }
            }
        }
        if weights[1] != 0.0 {
            for (g, b) in grad
                .iter_mut()
                .zip(screen_normals_backward(render, camera, &gn))
            {
                *g += b;
            }
        }
    }
    Ok(GeometricLoss {
        depth,
        normal,
        depth_pixels: nd,
        normal_pixels: nn,
        grad,
    })
}

/// Mean squared distance of the `visible` vertices of `mesh` to `center`.
pub fn shrink(mesh: &TriMesh, visible: &[u32], center: &Vec3) -> (f64, Vec<Vec3>) {
    let mut grad = vec![Vec3::zeros(); mesh.vertices.len()];
    if visible.is_empty() {
        return (0.0, grad);
    }
    let n = visible.len() as f64;
    let mut value = 0.0;
    for &v in visible {
        let d = mesh.vertices[v as usize] - center;
        value += d.norm_squared() / n;
        grad[v as usize] += d * (2.0 / n);
    }
    (value, grad)
}

/// Precomputed distance field and eroded interior of a hair mask.
#[derive(Clone, Debug)]
pub struct HairMaskMaps {
    pub mask: MaskImage,
    /// Distance to the nearest mask pixel.
    pub distance: ScalarImage,
    pub eroded: MaskImage,
}

impl HairMaskMaps {
    pub fn new(mask: &MaskImage) -> Self {
        HairMaskMaps {
            mask: mask.clone(),
            distance: distance_transform(mask),
            eroded: erode(mask, SOLID_ERODE_RADIUS),
        }
    }

    /// Mean over all pixels of `|M - A| * dist`, with gradient w.r.t. `A`.
    /// Pixels with infinite distance (empty mask) are skipped.
    pub fn silhouette(&self, alpha: &ScalarImage) -> Result<(f64, Vec<f64>)> {
        check_dims(alpha.dims(), self.mask.dims(), "silhouette alpha")?;
        let n = alpha.data.len() as f64;
        let mut grad = vec![0.0; alpha.data.len()];
        let mut value = 0.0;
        for i in 0..alpha.data.len() {
            let dist = self.distance.data[i];
            if dist == 0.0 || !dist.is_finite() {
                continue;
            }
            let m = if self.mask.data[i] { 1.0 } else { 0.0 };
            let d = alpha.data[i] - m;
            value += d.abs() * dist / n;
            grad[i] = if d > 0.0 {
                dist / n
            } else if d < 0.0 {
                -dist / n
            } else {
                0.0
            };
        }
        Ok((value, grad))
    }

    /// Mean of `1 - A` over the eroded mask, with gradient w.r.t. `A`.
    pub fn solid(&self, alpha: &ScalarImage) -> Result<(f64, Vec<f64>)> {
        check_dims(alpha.dims(), self.mask.dims(), "solid alpha")?;
        let n = self.eroded.count();
        let mut grad = vec![0.0; alpha.data.len()];
        if n == 0 {
            return Ok((0.0, grad));
        }
        let mut value = 0.0;
        for i in 0..alpha.data.len() {
            if self.eroded.data[i] {
                value += (1.0 - alpha.data[i]) / n as f64;
                grad[i] = -1.0 / n as f64;
            }
        }
        Ok((value, grad))
    }
}

/// Neighbour pairs of the canonical point cloud used by the as-isometric-as-possible
/// term.
#[derive(Clone, Debug)]
pub struct AiapGraph {
    pub k: usize,
    pub pairs: Vec<[u32; 2]>,
    pub rest: Vec<f64>,
}

impl AiapGraph {
    pub fn new(canonical: &[Vec3], k: usize) -> Result<Self> {
        if k == 0 {
            return param_err("aiap neighbour count must be positive");
        }
        if canonical.len() < k + 1 {
            return Err(Error::Parameter(format!(
                "aiap needs at least {} gaussians, got {}",
                k + 1,
                canonical.len()
            )));
        }
        let pts: Vec<[f64; 3]> = canonical.iter().map(|p| [p.x, p.y, p.z]).collect();
        let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&pts);
        let mut pairs = Vec::with_capacity(canonical.len() * k);
        let mut rest = Vec::with_capacity(canonical.len() * k);
        for (i, p) in pts.iter().enumerate() {
            let mut nn: Vec<(f64, u64)> = tree
                .nearest_n::<SquaredEuclidean>(p, NonZero::new(k + 1).expect("k + 1 > 0"))
                .into_iter()
                .map(|n| (n.distance, n.item))
                .filter(|&(_, j)| j as usize != i)
                .collect();
            nn.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, j) in nn.iter().take(k) {
                pairs.push([i as u32, j as u32]);
                rest.push((canonical[i] - canonical[j as usize]).norm());
            }
        }
        Ok(AiapGraph { k, pairs, rest })
    }

    /// Mean squared change of neighbour distances, with gradient w.r.t. `deformed`.
    pub fn loss(&self, deformed: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
        if let Some(m) = self.pairs.iter().flat_map(|p| p.iter()).max() {
            if *m as usize >= deformed.len() {
                return param_err("aiap graph and point cloud sizes differ");
            }
        }
        let mut grad = vec![Vec3::zeros(); deformed.len()];
        let n = self.pairs.len() as f64;
        let mut value = 0.0;
        for (p, r) in self.pairs.iter().zip(&self.rest) {
            let d = deformed[p[0] as usize] - deformed[p[1] as usize];
            let len = d.norm();
            let e = len - r;
            value += e * e / n;
            if len > 0.0 {
                let g = d * (2.0 * e / (n * len));
                grad[p[0] as usize] += g;
                grad[p[1] as usize] -= g;
            }
        }
        Ok((value, grad))
    }
}

/// Mean squared magnitude of the rotation, scale, opacity and colour offsets, with
/// gradients accumulated into a delta-shaped buffer scaled by `weight`.
pub fn delta_norms(delta: &GaussianDelta, weight: f64) -> (f64, GaussianDelta) {
    let mut g = GaussianDelta::zeros(
        delta.len(),
        delta.sh.len().checked_div(delta.len()).unwrap_or(0),
    );
    let n = delta.len();
    if n == 0 {
        return (0.0, g);
    }
    let nf = n as f64;
    let mut value = 0.0;
    for i in 0..n {
        for a in 0..4 {
            value += delta.rotations[i][a].powi(2) / nf;
            g.rotations[i][a] = 2.0 * weight * delta.rotations[i][a] / nf;
        }
        for a in 0..3 {
            value += delta.log_scales[i][a].powi(2) / nf;
            g.log_scales[i][a] = 2.0 * weight * delta.log_scales[i][a] / nf;
        }
        value += delta.opacity_logits[i].powi(2) / nf;
        g.opacity_logits[i] = 2.0 * weight * delta.opacity_logits[i] / nf;
    }
    for (j, v) in delta.sh.iter().enumerate() {
        value += v * v / nf;
        g.sh[j] = 2.0 * weight * v / nf;
    }
    (value, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn photometric_offset_and_empty_mask() {
        let a = ColorImage::filled(6, 5, [0.2; 3]);
        let b = ColorImage::filled(6, 5, [0.3; 3]);
        let m = MaskImage::filled(6, 5, true);
        assert!((photometric(&a, &b, &m).unwrap().value - 0.01).abs() < 1e-12);
        let e = photometric(&a, &b, &MaskImage::filled(6, 5, false)).unwrap();
        assert!(e.empty && e.value == 0.0 && e.grad.iter().all(|g| *g == [0.0; 3]));
    }

    fn depth_scene() -> (Camera, ScalarImage, ScalarImage) {
        let cam = Camera::look_at(
            Vec3::zeros(),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(0.0, -1.0, 0.0),
            30.0,
            12,
            10,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = ScalarImage {
            width: 12,
            height: 10,
            data: (0..120)
                .map(|i| 1.0 + 0.01 * ((i % 12) as f64 * 0.4).sin() + 0.002 * (i / 12) as f64)
                .collect(),
        };
        let mut render = target.clone();
        for v in render.data.iter_mut() {
            *v += rng.random_range(-0.003..0.003);
        }
        render.data[30] += 0.5;
        render.data[77] = f64::INFINITY;
        (cam, target, render)
    }

    #[test]
    fn geometric_gradient_matches_fd() {
        let (cam, target, render) = depth_scene();
        let w = [0.7, 0.3];
        let f = |r: &ScalarImage| {
            let l = geometric(&target, r, &cam, DEPTH_DELTA, w).unwrap();
            w[0] * l.depth + w[1] * l.normal
        };
        let l = geometric(&target, &render, &cam, DEPTH_DELTA, w).unwrap();
        assert!(l.depth_pixels < 119 && l.normal_pixels > 0);
        let h = 1e-7;
        for i in 0..120 {
            if !render.data[i].is_finite() {
                continue;
            }
            let mut p = render.clone();
            p.data[i] += h;
            let mut m = render.clone();
            m.data[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!(
                (fd - l.grad[i]).abs() < 1e-5 * (1.0 + fd.abs()),
                "{i}: {fd} {}",
                l.grad[i]
            );
        }
    }

    #[test]
    fn silhouette_and_solid() {
        let mut m = MaskImage::filled(30, 30, false);
        for y in 5..25 {
            for x in 5..25 {
                m.data[y * 30 + x] = true;
            }
        }
        let maps = HairMaskMaps::new(&m);
        let exact = m.to_scalar();
        assert_eq!(maps.silhouette(&exact).unwrap().0, 0.0);
        assert_eq!(maps.solid(&exact).unwrap().0, 0.0);
        let zero = ScalarImage::filled(30, 30, 0.0);
        assert!((maps.solid(&zero).unwrap().0 - 1.0).abs() < 1e-12);
        assert_eq!(maps.silhouette(&zero).unwrap().0, 0.0);
        let mut spill = exact.clone();
        spill.data[2 * 30 + 15] = 1.0;
        let (v, g) = maps.silhouette(&spill).unwrap();
        assert!((v - 3.0 / 900.0).abs() < 1e-12 && (g[2 * 30 + 15] - 3.0 / 900.0).abs() < 1e-12);
        assert_eq!(maps.eroded.count(), 100);
    }

    #[test]
    fn aiap_rigid_invariance_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Vec3> = (0..30)
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let g = AiapGraph::new(&pts, 5).unwrap();
        assert_eq!(g.pairs.len(), 150);
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.2, 1.0);
        let moved: Vec<Vec3> = pts
            .iter()
            .map(|p| rot * p + Vec3::new(1.0, 2.0, 3.0))
            .collect();
        assert!(g.loss(&moved).unwrap().0 < 1e-24);
        let def: Vec<Vec3> = pts
            .iter()
            .map(|p| p + Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1)))
            .collect();
        let (_, grad) = g.loss(&def).unwrap();
        let h = 1e-6;
        for i in 0..30 {
            for a in 0..3 {
                let mut p = def.clone();
                p[i][a] += h;
                let mut m = def.clone();
                m[i][a] -= h;
                let fd = (g.loss(&p).unwrap().0 - g.loss(&m).unwrap().0) / (2.0 * h);
                assert!((fd - grad[i][a]).abs() < 1e-8);
            }
        }
        assert!(AiapGraph::new(&pts[..5], 5).is_err());
    }

    #[test]
    fn shrink_gradient() {
        let mesh = TriMesh {
            vertices: vec![
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 2.0, 0.0),
                Vec3::new(0.0, 0.0, 3.0),
            ],
            faces: vec![[0, 1, 2]],
            uvs: vec![[0.0; 2]; 3],
        };
        let (v, g) = shrink(&mesh, &[0, 2], &Vec3::zeros());
        assert!((v - 5.0).abs() < 1e-12);
        assert_eq!(g[1], Vec3::zeros());
        assert_eq!(g[2], Vec3::new(0.0, 0.0, 3.0));
    }
}
