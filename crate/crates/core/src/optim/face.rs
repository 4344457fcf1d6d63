//! Face stage: textures, pixel decoder and displacement from head-only views.

use log::info;

use super::adam::Adam;
use super::losses::{geometric, photometric, shrink, ssim_loss};
use super::metrics::{psnr, ssim};
use super::{check_records, FrameRecord, LossWeights, Schedule, StageLog, TrainConfig};
use crate::avatar::{view_dirs, Avatar, FaceRig};
use crate::error::{Error, Result};
use crate::geometry::visible_scalp;
use crate::imaging::MaskImage;
use crate::raster::{depth_vertex_grads, rasterize, Vec3};
use crate::texture::TextureGrads;

/// Individual terms of the face objective and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FaceTerms {
    pub pho: f64,
    pub pho_diffuse: f64,
    pub ssim: f64,
    pub depth: f64,
    pub normal: f64,
    pub shrink: f64,
    pub lap: f64,
    pub nc: f64,
    pub el: f64,
    pub total: f64,
    /// Masked PSNR of the full render; NaN when the mask is empty.
    pub psnr: f64,
}

impl FaceTerms {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.p * self.pho
            + 3.0 * w.p * self.pho_diffuse
            + w.ssim * self.ssim
            + w.depth * self.depth
            + w.normal * self.normal
            + w.shrink * self.shrink
            + w.lap * self.lap
            + w.nc * self.nc
            + w.el * self.el
    }
}

#[derive(Clone, Debug)]
pub struct FaceGrads {
    pub textures: TextureGrads,
    pub displacement: Vec<f64>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Face objective on one record and, optionally, its gradient w.r.t. the textures,
/// decoder and displacement model.
pub fn face_objective(
    avatar: &Avatar,
    rig: &FaceRig,
    rec: &FrameRecord,
    w: &LossWeights,
    depth_delta: f64,
    want_grad: bool,
) -> Result<(FaceTerms, Option<FaceGrads>)> {
    let target_depth = rec.depth.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "frame {} view {} has no depth target",
            rec.frame, rec.view
        ))
    })?;
    let cam = &rec.camera;
    let (posed, rest, mesh) = avatar.head_meshes(rig, &rec.params)?;
    let raster = rasterize(&mesh, cam)?;
    let dirs = view_dirs(cam);
    let psi = &rec.params.psi;
    let full = avatar
        .textures
        .decode_face(&raster, &dirs, psi, &avatar.decoder, false)?;
    let diffuse = avatar
        .textures
        .decode_face(&raster, &dirs, psi, &avatar.decoder, true)?;

    let mut mask = rec.face_mask();
    mask.data
        .iter_mut()
        .enumerate()
        .for_each(|(i, m)| *m = *m && raster.covered(i));
    let l_pho = photometric(&rec.head_image, &full.image, &mask)?;
    let l_di = photometric(&rec.head_image, &diffuse.image, &mask)?;
    let l_ss = ssim_loss(&rec.head_image, &full.image, &mask)?;
    let geo = geometric(
        target_depth,
        &raster.depth,
        cam,
        depth_delta,
        [w.depth, w.normal],
    )?;

    let scalp = &avatar.head.scalp;
    let center = if scalp.is_empty() {
        Vec3::zeros()
    } else {
        scalp
            .iter()
            .map(|&s| posed.vertices[s as usize])
            .sum::<Vec3>()
            / scalp.len() as f64
    };
    let visible = visible_scalp(&mesh, scalp, &rec.hair_mask, cam)?;
    let (l_shr, g_shr) = shrink(&mesh, &visible, &center);
    let (reg, g_reg) = rig
        .topology
        .regularizer_grads(&mesh, &rest, [w.lap, w.nc, w.el])?;

    let mut terms = FaceTerms {
        pho: l_pho.value,
        pho_diffuse: l_di.value,
        ssim: l_ss.value,
        depth: geo.depth,
        normal: geo.normal,
        shrink: l_shr,
        lap: reg.lap,
        nc: reg.nc,
        el: reg.el,
        total: 0.0,
        psnr: if mask.count() > 0 {
            psnr(&rec.head_image, &full.image, Some(&mask))?
        } else {
            f64::NAN
        },
    };
    terms.total = terms.weighted_total(w);
    if !want_grad {
        return Ok((terms, None));
    }

    let g_full: Vec<[f64; 3]> = l_pho
        .grad
        .iter()
        .zip(&l_ss.grad)
        .map(|(a, b)| [0, 1, 2].map(|c| w.p * a[c] + w.ssim * b[c]))
        .collect();
    let g_di: Vec<[f64; 3]> = l_di.grad.iter().map(|a| a.map(|v| 3.0 * w.p * v)).collect();
    let mut tex = avatar
        .textures
        .decode_backward(&avatar.decoder, &full, &g_full)?;
    let tex_di = avatar
        .textures
        .decode_backward(&avatar.decoder, &diffuse, &g_di)?;
    add_into(&mut tex.diffuse, &tex_di.diffuse);
    add_into(&mut tex.decoder, &tex_di.decoder);

    let mut vg = depth_vertex_grads(&mesh, cam, &raster, &geo.grad);
    for ((v, s), r) in vg.iter_mut().zip(&g_shr).zip(&g_reg) {
        *v += s * w.shrink + r;
    }
    let displacement = if avatar.displacement.enabled {
        avatar
            .displacement
            .backward(&rig.taps, &rec.params.conditioning(), &vg)
    } else {
        vec![0.0; avatar.displacement.param_len()]
    };
    Ok((
        terms,
        Some(FaceGrads {
            textures: tex,
            displacement,
        }),
    ))
}

/// Mean masked PSNR / SSIM and depth MAE over records.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub depth_mae: f64,
}

pub fn evaluate_face(
    avatar: &Avatar,
    rig: &FaceRig,
    records: &[&FrameRecord],
) -> Result<FaceSummary> {
    let (mut p, mut s, mut d, mut n) = (0.0, 0.0, 0.0, 0usize);
    let mut nd = 0usize;
    for rec in records {
        let head = avatar.render_head(rig, &rec.params, &rec.camera, false)?;
        let mut mask = rec.face_mask();
        mask.data
            .iter_mut()
            .enumerate()
            .for_each(|(i, m)| *m = *m && head.raster.covered(i));
        if mask.count() == 0 {
            continue;
        }
        p += psnr(&rec.head_image, &head.face.image, Some(&mask))?;
        s += ssim(&rec.head_image, &head.face.image, Some(&mask))?;
        n += 1;
        if let Some(z) = &rec.depth {
            if let Some(mae) = depth_mae(z, &head.raster.depth, &mask) {
                d += mae;
                nd += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric(
            "no face pixels in any record".into(),
        ));
    }
    Ok(FaceSummary {
        psnr: p / n as f64,
        ssim: s / n as f64,
        depth_mae: if nd > 0 { d / nd as f64 } else { f64::NAN },
    })
}

/// Mean absolute depth difference over masked pixels where both depths are finite.
pub fn depth_mae(
    a: &crate::imaging::ScalarImage,
    b: &crate::imaging::ScalarImage,
    mask: &MaskImage,
) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for i in 0..a.data.len() {
        if mask.data[i] && a.data[i].is_finite() && b.data[i].is_finite() {
            s += (a.data[i] - b.data[i]).abs();
            n += 1;
        }
    }
    (n > 0).then(|| s / n as f64)
}

pub(crate) const FACE_COLUMNS: [&str; 14] = [
    "iter",
    "frame",
    "view",
    "pho",
    "pho_diffuse",
    "ssim",
    "depth",
    "normal",
    "shrink",
    "lap",
    "nc",
    "el",
    "total",
    "psnr",
];

/// Optimises the diffuse, view and dynamic textures, the pixel decoder and the
/// displacement model. Parameters are rounded to f32 at the end of a non-empty run.
pub fn train_face(
    avatar: &mut Avatar,
    records: &[&FrameRecord],
    cfg: &TrainConfig,
) -> Result<StageLog> {
    cfg.validate()?;
    check_records(records)?;
    if records.iter().any(|r| r.depth.is_none()) {
        return Err(Error::Config(
            "face stage needs a depth target for every frame".into(),
        ));
    }
    let mut log = StageLog::new(&FACE_COLUMNS);
    let fc = &cfg.face;
    if fc.iters == 0 {
        return Ok(log);
    }
    let rig = avatar.rig()?;
    let t = &avatar.textures;
    let mut opt_di = Adam::new(t.diffuse.data.len(), fc.lr_texture);
    let mut opt_v = Adam::new(t.view.coeffs.len(), fc.lr_texture);
    let mut opt_dy = Adam::new(t.dynamic.basis.len(), fc.lr_texture);
    let mut opt_pix = Adam::new(avatar.decoder.param_count(), fc.lr_decoder);
    let mut opt_disp = Adam::new(avatar.displacement.param_len(), fc.lr_displacement);
    let mut sched = Schedule::new(records.len(), cfg.seed);
    for it in 0..fc.iters {
        let rec = records[sched.next()];
        let (terms, grads) = face_objective(avatar, &rig, rec, &cfg.weights, fc.depth_delta, true)?;
        let g = grads.expect("gradients requested");
        let t = &mut avatar.textures;
        opt_di.step(&mut t.diffuse.data, &g.textures.diffuse)?;
        opt_v.step(&mut t.view.coeffs, &g.textures.view)?;
        opt_dy.step(&mut t.dynamic.basis, &g.textures.dynamic)?;
        let mut p = avatar.decoder.params();
        opt_pix.step(&mut p, &g.textures.decoder)?;
        avatar.decoder.set_params(&p);
        if avatar.displacement.enabled {
            let mut p = avatar.displacement.params();
            opt_disp.step(&mut p, &g.displacement)?;
            avatar.displacement.set_params(&p);
        }
        log.push(vec![
            it as f64,
            rec.frame as f64,
            rec.view as f64,
            terms.pho,
            terms.pho_diffuse,
            terms.ssim,
            terms.depth,
            terms.normal,
            terms.shrink,
            terms.lap,
            terms.nc,
            terms.el,
            terms.total,
            terms.psnr,
        ]);
    }
    avatar.snap_f32();
    let summary = evaluate_face(avatar, &rig, records)?;
    info!(
        "face stage: {} iters, psnr {:.2} dB, ssim {:.4}, depth mae {:.2e}",
        fc.iters, summary.psnr, summary.ssim, summary.depth_mae
    );
    Ok(log)
}
