//! Rigid and similarity point-set registration.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, UnitQuaternion};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::raster::Vec3;

/// `p -> scale * rotation * p + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub scale: f64,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        RigidTransform {
            rotation,
            translation,
            scale: 1.0,
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let r = UnitQuaternion::from_scaled_axis(axis.normalize() * angle);
        RigidTransform::new(*r.to_rotation_matrix().matrix(), translation)
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.apply(&other.translation),
            scale: self.scale * other.scale,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }

    /// Rotation as a `(w, x, y, z)` quaternion with `w >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    pub fn validate(&self) -> Result<()> {
        let orth = (self.rotation * self.rotation.transpose() - Matrix3::identity())
            .abs()
            .max();
        if orth > 1e-9 || (self.rotation.determinant() - 1.0).abs() > 1e-9 {
            return param_err("transform rotation is not a proper rotation");
        }
        if !(self.scale > 0.0 && self.scale.is_finite())
            || !self.translation.iter().all(|v| v.is_finite())
        {
            return param_err("transform scale must be positive and values finite");
        }
        Ok(())
    }

    /// Row-major `[R | t]` followed by the scale.
    pub fn to_row_major(&self) -> [f64; 13] {
        let mut out = [0.0; 13];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out[12] = self.scale;
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<RigidTransform> {
        if v.len() != 12 && v.len() != 13 {
            return Err(Error::Format(format!(
                "transform needs 12 or 13 values, got {}",
                v.len()
            )));
        }
        let rotation = Matrix3::from_fn(|r, c| v[r * 4 + c]);
        let translation = Vec3::new(v[3], v[7], v[11]);
        let t = RigidTransform {
            rotation,
            translation,
            scale: if v.len() == 13 { v[12] } else { 1.0 },
        };
        t.validate()?;
        Ok(t)
    }
}

fn centroid(p: &[Vec3]) -> Vec3 {
    p.iter().fold(Vec3::zeros(), |a, b| a + b) / p.len() as f64
}

fn check_rank(points: &[Vec3], what: &str) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::RankDeficient(format!(
            "{what} needs at least 3 points"
        )));
    }
    let c = centroid(points);
    let cov = points
        .iter()
        .fold(Matrix3::zeros(), |a, p| a + (p - c) * (p - c).transpose());
    let sv = cov.symmetric_eigenvalues();
    let mut s: Vec<f64> = sv.iter().map(|v| v.abs()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if !(s[0] > 0.0) || s[1] <= 1e-12 * s[0] {
        return Err(Error::RankDeficient(format!(
            "{what} points are coincident or collinear"
        )));
    }
    Ok(())
}

/// Closed-form least-squares alignment of paired points (`dst[i] ~ T(src[i])`).
pub fn procrustes(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return param_err("procrustes needs paired point sets of equal length");
    }
    check_rank(src, "source")?;
    let n = src.len() as f64;
    let (ms, md) = (centroid(src), centroid(dst));
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - ms, d - md);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let sign = if (u * vt).determinant() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let d = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, sign));
    let rotation = u * d * vt;
    let scale = if with_scale {
        let s = svd.singular_values;
        (s[0] + s[1] + sign * s[2]) / var_s
    } else {
        1.0
    };
    if !(scale > 0.0) {
        return Err(Error::Alignment(
            "similarity fit produced a non-positive scale".into(),
        ));
    }
    Ok(RigidTransform {
        rotation,
        translation: md - rotation * ms * scale,
        scale,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correspondence {
    NearestNeighbor,
    /// `src[i]` pairs with `dst[i]`.
    Index,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpOptions {
    pub with_scale: bool,
    pub correspondence: Correspondence,
    /// Also start from the four proper principal-axis alignments and keep the best.
    pub principal_axis_starts: bool,
    pub max_iters: usize,
    pub tol: f64,
    /// Fraction of closest correspondences kept per iteration; 1 disables trimming.
    pub trim_fraction: f64,
}

impl Default for IcpOptions {
    fn default() -> Self {
        IcpOptions {
            with_scale: false,
            correspondence: Correspondence::NearestNeighbor,
            principal_axis_starts: true,
            max_iters: 50,
            tol: 1e-9,
            trim_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// RMS nearest-neighbour distance at `transform`.
    pub residual: f64,
    pub iterations: usize,
    /// Residual after each iteration, starting with the initial alignment.
    pub history: Vec<f64>,
}

struct Matches {
    src_idx: Vec<usize>,
    dst_idx: Vec<usize>,
    rms: f64,
}

enum Matcher {
    Tree(ImmutableKdTree<f64, 3>),
    Index,
}

fn correspond(
    matcher: &Matcher,
    src: &[Vec3],
    dst: &[Vec3],
    t: &RigidTransform,
    trim: f64,
) -> Matches {
    let nn: Vec<(f64, usize)> = src
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let q = t.apply(p);
            match matcher {
                Matcher::Tree(tree) => {
                    let r = tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]);
                    (r.distance, r.item as usize)
                }
                Matcher::Index => ((q - dst[i]).norm_squared(), i),
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..src.len()).collect();
    let keep = if trim < 1.0 {
        order.sort_by(|&a, &b| nn[a].0.total_cmp(&nn[b].0).then(a.cmp(&b)));
        ((src.len() as f64 * trim).round() as usize).clamp(3.min(src.len()), src.len())
    } else {
        src.len()
    };
    order.truncate(keep);
    order.sort_unstable();
    let rms = (order.iter().map(|&i| nn[i].0).sum::<f64>() / keep as f64).sqrt();
    Matches {
        dst_idx: order.iter().map(|&i| nn[i].1).collect(),
        src_idx: order,
        rms,
    }
}

/// Principal axes as matrix columns, sorted by decreasing variance, right-handed.
fn principal_axes(p: &[Vec3]) -> Matrix3<f64> {
    let c = centroid(p);
    let cov = p
        .iter()
        .fold(Matrix3::zeros(), |a, q| a + (q - c) * (q - c).transpose());
    let eig = cov.symmetric_eigen();
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut m = Matrix3::from_columns(&[
        eig.eigenvectors.column(idx[0]).into_owned(),
        eig.eigenvectors.column(idx[1]).into_owned(),
        eig.eigenvectors.column(idx[2]).into_owned(),
    ]);
    if m.determinant() < 0.0 {
        m.set_column(2, &(-m.column(2)));
    }
    m
}

fn starts(src: &[Vec3], dst: &[Vec3], opts: &IcpOptions) -> Vec<RigidTransform> {
    let (cs, cd) = (centroid(src), centroid(dst));
    // Moment-matched scale: exact for a similarity copy, and it keeps
    // nearest-neighbour matching from pulling the fit into a shrinking collapse.
    let scale = if opts.with_scale {
        let spread = |p: &[Vec3], c: Vec3| {
            p.iter().map(|q| (q - c).norm_squared()).sum::<f64>() / p.len() as f64
        };
        (spread(dst, cd) / spread(src, cs)).sqrt()
    } else {
        1.0
    };
    let at = |rotation: Matrix3<f64>| RigidTransform {
        rotation,
        translation: cd - rotation * cs * scale,
        scale,
    };
    let mut out = vec![at(Matrix3::identity())];
    if opts.principal_axis_starts && opts.correspondence == Correspondence::NearestNeighbor {
        let (a, b) = (principal_axes(src), principal_axes(dst));
        for flip in [
            [1.0, 1.0, 1.0],
            [-1.0, -1.0, 1.0],
            [-1.0, 1.0, -1.0],
            [1.0, -1.0, -1.0],
        ] {
            out.push(at(b
                * Matrix3::from_diagonal(&Vec3::from(flip))
                * a.transpose()));
        }
    }
    out
}

fn refine(
    matcher: &Matcher,
    src: &[Vec3],
    dst: &[Vec3],
    start: RigidTransform,
    opts: &IcpOptions,
) -> Result<IcpResult> {
    let mut t = start;
    let mut m = correspond(matcher, src, dst, &t, opts.trim_fraction);
    let mut history = vec![m.rms];
    let mut iterations = 0;
    while iterations < opts.max_iters && m.rms > 0.0 {
        let s: Vec<Vec3> = m.src_idx.iter().map(|&i| src[i]).collect();
        let d: Vec<Vec3> = m.dst_idx.iter().map(|&i| dst[i]).collect();
        let next = procrustes(&s, &d, opts.with_scale)?;
        let nm = correspond(matcher, src, dst, &next, opts.trim_fraction);
        iterations += 1;
        if nm.rms > m.rms * (1.0 + 1e-9) + 1e-15 {
            // Only reachable through round-off or trimming; keep the better estimate.
            log::debug!("icp residual rose from {} to {}; stopping", m.rms, nm.rms);
            break;
        }
        let change = m.rms - nm.rms;
        t = next;
        m = nm;
        history.push(m.rms);
        if change < opts.tol {
            break;
        }
    }
    Ok(IcpResult {
        transform: t,
        residual: m.rms,
        iterations,
        history,
    })
}

/// Iterative closest point from a centroid-aligned start (plus optional
/// principal-axis starts); the lowest final residual divided by scale wins,
/// earlier starts on ties. Similarity fits start at the moment-matched scale.
pub fn icp(src: &[Vec3], dst: &[Vec3], opts: &IcpOptions) -> Result<IcpResult> {
    check_rank(src, "source")?;
    check_rank(dst, "target")?;
    if !(opts.trim_fraction > 0.0 && opts.trim_fraction <= 1.0) {
        return param_err("trim fraction must be in (0, 1]");
    }
    let matcher = match opts.correspondence {
        Correspondence::NearestNeighbor => {
            let pts: Vec<[f64; 3]> = dst.iter().map(|p| [p.x, p.y, p.z]).collect();
            Matcher::Tree(ImmutableKdTree::<f64, 3>::new_from_slice(&pts))
        }
        Correspondence::Index => {
            if src.len() != dst.len() {
                return param_err("index correspondence needs equal-length point sets");
            }
            Matcher::Index
        }
    };
    // Starts are ranked by the residual in source units so that a shrunken
    // similarity fit cannot win by scale alone.
    let rank = |r: &IcpResult| r.residual / r.transform.scale;
    let mut best: Option<IcpResult> = None;
    for s in starts(src, dst, opts) {
        let r = refine(&matcher, src, dst, s, opts)?;
        if best.as_ref().is_none_or(|b| rank(&r) < rank(b)) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one start"))
}
