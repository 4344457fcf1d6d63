use nalgebra::{Matrix2x3, Matrix3};

use super::{eval_sh, quat_to_matrix, GaussianCloud};
use crate::raster::{Camera, Vec3};

/// Screen-space dilation added to every projected covariance, in pixels squared.
pub const COV_DILATION: f64 = 0.3;
const MIN_DET: f64 = 1e-12;

/// A Gaussian after EWA projection into one camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    /// Screen position of the centre in pixels.
    pub mean: [f64; 2],
    /// `(a, b, c)` of the symmetric 2x2 covariance.
    pub cov: [f64; 3],
    /// Inverse covariance, same packing.
    pub conic: [f64; 3],
    /// Camera-space z of the centre.
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Half-width of the pixel footprint beyond which alpha is below the cutoff.
    pub radius: f64,
    pub(crate) cam: Vec3,
    pub(crate) dir: Vec3,
    pub(crate) dir_len: f64,
    pub(crate) unit_q: [f64; 4],
    pub(crate) q_norm: f64,
    pub(crate) rot: Matrix3<f64>,
    pub(crate) scale: Vec3,
    pub(crate) sigma3: Matrix3<f64>,
    pub(crate) jw: Matrix2x3<f64>,
}

/// Projects Gaussian `i`; `None` when it is culled (centre not in front of the
/// near plane, singular footprint, or too transparent to ever pass `alpha_cutoff`).
pub fn project_gaussian(
    cloud: &GaussianCloud,
    i: usize,
    camera: &Camera,
    alpha_cutoff: f64,
) -> Option<Projected> {
    let cam = camera.to_camera(&cloud.positions[i]);
    if !(cam.z > camera.near) {
        return None;
    }
    let q = cloud.rotations[i];
    let q_norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let unit_q = q.map(|v| v / q_norm);
    let rot = quat_to_matrix(&unit_q);
    let scale = cloud.log_scales[i].map(f64::exp);
    let m = rot * Matrix3::from_diagonal(&scale);
    let sigma3 = m * m.transpose();
    let (tx, ty, tz) = (cam.x, cam.y, cam.z);
    let j = Matrix2x3::new(
        camera.fx / tz,
        0.0,
        -camera.fx * tx / (tz * tz),
        0.0,
        camera.fy / tz,
        -camera.fy * ty / (tz * tz),
    );
    let jw = j * camera.rotation;
    let c2 = jw * sigma3 * jw.transpose();
    let cov = [
        c2[(0, 0)] + COV_DILATION,
        0.5 * (c2[(0, 1)] + c2[(1, 0)]),
        c2[(1, 1)] + COV_DILATION,
    ];
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det >= MIN_DET) {
        return None;
    }
    let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
    let opacity = cloud.opacity(i);
    if !(opacity >= alpha_cutoff) {
        return None;
    }
    let mid = 0.5 * (cov[0] + cov[2]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    // alpha = o exp(-q/2) < cutoff once q > 2 ln(o / cutoff); q >= |delta|^2 / lambda_max.
    let radius =
        (2.0 * (opacity / alpha_cutoff).ln().max(0.0) * lambda_max).sqrt() * (1.0 + 1e-6) + 1e-9;
    let rel = cloud.positions[i] - camera.center();
    let dir_len = rel.norm();
    let dir = rel / dir_len;
    let color = eval_sh(cloud.sh_degree, cloud.sh_of(i), &dir);
    let mean = camera.project_camera(&cam);
    Some(Projected {
        mean,
        cov,
        conic,
        depth: tz,
        opacity,
        color,
        radius,
        cam,
        dir,
        dir_len,
        unit_q,
        q_norm,
        rot,
        scale,
        sigma3,
        jw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::logit;

    fn iso_cloud(pos: Vec3, sigma: f64, q: [f64; 4]) -> GaussianCloud {
        let mut c = GaussianCloud::new(0);
        c.push(pos, q, Vec3::repeat(sigma.ln()), logit(0.5), &[0.0; 3]);
        c
    }

    fn cam() -> Camera {
        Camera::look_at(Vec3::zeros(), Vec3::z(), -Vec3::y(), 200.0, 64, 64)
    }

    #[test]
    fn isotropic_on_axis() {
        let (z, s) = (2.0, 0.05);
        let p = project_gaussian(
            &iso_cloud(Vec3::new(0.0, 0.0, z), s, [1.0, 0.0, 0.0, 0.0]),
            0,
            &cam(),
            1.0 / 255.0,
        )
        .unwrap();
        let want = (200.0 * s / z).powi(2) + COV_DILATION;
        assert!(
            (p.cov[0] - want).abs() < 1e-9
                && (p.cov[2] - want).abs() < 1e-9
                && p.cov[1].abs() < 1e-12
        );
        assert!((p.depth - z).abs() < 1e-12);
        assert_eq!(p.mean, [32.0, 32.0]);
    }

    #[test]
    fn doubling_distance_halves_std() {
        let s = 0.05;
        let std = |z: f64| {
            let p = project_gaussian(
                &iso_cloud(Vec3::new(0.0, 0.0, z), s, [1.0, 0.0, 0.0, 0.0]),
                0,
                &cam(),
                1e-3,
            )
            .unwrap();
            (p.cov[0] - COV_DILATION).sqrt()
        };
        assert!((std(2.0) / std(4.0) - 2.0).abs() < 0.02);
    }

    #[test]
    fn rotation_leaves_isotropic_footprint_unchanged() {
        let pos = Vec3::new(0.2, -0.1, 1.5);
        let a =
            project_gaussian(&iso_cloud(pos, 0.03, [1.0, 0.0, 0.0, 0.0]), 0, &cam(), 1e-3).unwrap();
        let b = project_gaussian(
            &iso_cloud(pos, 0.03, [0.5, 0.5, -0.5, 0.5]),
            0,
            &cam(),
            1e-3,
        )
        .unwrap();
        for k in 0..3 {
            assert!((a.cov[k] - b.cov[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn behind_camera_is_culled() {
        assert!(project_gaussian(
            &iso_cloud(Vec3::new(0.0, 0.0, -1.0), 0.1, [1.0, 0.0, 0.0, 0.0]),
            0,
            &cam(),
            1e-3
        )
        .is_none());
    }
}
