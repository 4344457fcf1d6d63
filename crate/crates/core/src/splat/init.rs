use std::collections::HashSet;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{logit, GaussianCloud};
use crate::error::{param_err, Result};
use crate::geometry::TriMesh;
use crate::raster::Vec3;

/// Seeds `n` Gaussians on the scalp: area-uniform samples on triangles whose three
/// vertices are all scalp vertices; every odd-indexed sample is pushed out along the
/// face normal by `uniform(0, shell)`. Scales are isotropic at the mean
/// nearest-neighbour spacing, opacity 0.1, colour mid-gray.
pub fn init_from_scalp(
    mesh: &TriMesh,
    scalp: &[u32],
    n: usize,
    shell: f64,
    sh_degree: usize,
    seed: u64,
) -> Result<GaussianCloud> {
    if n == 0 {
        return param_err("at least one Gaussian is required");
    }
    if !(shell >= 0.0) || sh_degree > 3 {
        return param_err("shell must be non-negative and SH degree at most 3");
    }
    let set: HashSet<u32> = scalp.iter().copied().collect();
    let faces: Vec<usize> = (0..mesh.faces.len())
        .filter(|&f| mesh.faces[f].iter().all(|v| set.contains(v)))
        .collect();
    let mut cdf = Vec::with_capacity(faces.len());
    let mut total = 0.0;
    for &f in &faces {
        total += mesh.face_area(f);
        cdf.push(total);
    }
    if faces.is_empty() || !(total > 0.0) {
        return param_err("scalp region has no triangles with area");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(n);
    for i in 0..n {
        let r = rng.random_range(0.0..total);
        let k = cdf.partition_point(|&c| c <= r).min(faces.len() - 1);
        let f = faces[k];
        let [a, b, c] = mesh.faces[f].map(|v| mesh.vertices[v as usize]);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        let mut p = a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2);
        let off: f64 = if i % 2 == 1 && shell > 0.0 {
            rng.random_range(0.0..shell)
        } else {
            0.0
        };
        if off > 0.0 {
            p += mesh.face_normal_raw(f).normalize() * off;
        }
        positions.push(p);
    }
    let spacing = mean_spacing(&positions).unwrap_or(0.0);
    let spacing = if spacing > 0.0 {
        spacing
    } else {
        (total / n as f64).sqrt()
    };
    let mut cloud = GaussianCloud::new(sh_degree);
    let sh = vec![0.0; cloud.sh_stride()];
    for p in positions {
        cloud.push(
            p,
            [1.0, 0.0, 0.0, 0.0],
            Vec3::repeat(spacing.ln()),
            logit(0.1),
            &sh,
        );
    }
    Ok(cloud)
}

fn mean_spacing(points: &[Vec3]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let pts: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree = ImmutableKdTree::<f64, 3>::new_from_slice(&pts);
    let k = std::num::NonZero::new(2).expect("non-zero");
    let sum: f64 = pts
        .iter()
        .map(|p| tree.nearest_n::<SquaredEuclidean>(p, k)[1].distance.sqrt())
        .sum();
    Some(sum / points.len() as f64)
}

/// Drops Gaussians with `sigmoid(o) < threshold`; returns the kept original indices.
pub fn prune_transparent(cloud: &GaussianCloud, threshold: f64) -> (GaussianCloud, Vec<usize>) {
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| cloud.opacity(i) >= threshold)
        .collect();
    (cloud.select(&keep), keep)
}
