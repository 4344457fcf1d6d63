//! Joint stage: deformation field and textures over the whole sequence.

use std::collections::BTreeMap;

use log::info;

use super::adam::Adam;
use super::losses::{delta_norms, photometric, ssim_loss, AiapGraph};
use super::metrics::psnr;
use super::{check_records, FrameRecord, LossWeights, Schedule, StageLog, TrainConfig};
use crate::align::RigidTransform;
use crate::avatar::{Avatar, FaceRig};
use crate::blend::composite_premultiplied_backward;
use crate::error::{Error, Result};
use crate::imaging::MaskImage;
use crate::splat::{splat_backward, DeformationField, FieldGrads};
use crate::texture::TextureGrads;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JointTerms {
    pub pho: f64,
    pub ssim: f64,
    pub deltas: f64,
    pub aiap: f64,
    pub total: f64,
    /// Full-image PSNR.
    pub psnr: f64,
}

impl JointTerms {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.p * self.pho + w.ssim * self.ssim + w.deltas * self.deltas + w.aiap * self.aiap
    }
}

#[derive(Clone, Debug)]
pub struct JointGrads {
    pub field: FieldGrads,
    pub textures: TextureGrads,
}

/// Rigid hair transform of every frame present in `records`, keyed by frame index.
pub fn frame_transforms(
    avatar: &Avatar,
    rig: &FaceRig,
    records: &[&FrameRecord],
) -> Result<BTreeMap<usize, RigidTransform>> {
    let mut out = BTreeMap::new();
    for r in records {
        if let std::collections::btree_map::Entry::Vacant(e) = out.entry(r.frame) {
            e.insert(avatar.hair_transform(rig, &r.params)?);
        }
    }
    Ok(out)
}

/// Full-image objective of one record with offset and isometry regularisers.
pub fn joint_objective(
    avatar: &Avatar,
    rig: &FaceRig,
    rec: &FrameRecord,
    transform: &RigidTransform,
    aiap: &AiapGraph,
    w: &LossWeights,
    want_grad: bool,
) -> Result<(JointTerms, Option<JointGrads>)> {
    let field = avatar
        .field
        .as_ref()
        .ok_or_else(|| Error::Config("joint stage needs a deformation field".into()))?;
    let cam = &rec.camera;
    let head = avatar.render_head(rig, &rec.params, cam, false)?;
    let posed = avatar
        .pose_hair_with(transform, &rec.params.psi)?
        .expect("hair present");
    let (hair, image) = avatar.composite_hair(&head, posed, cam)?;
    let (delta, trace) = hair.posed.deform.as_ref().expect("field present");
    let all = MaskImage::filled(cam.width, cam.height, true);
    let l_pho = photometric(&rec.image, &image, &all)?;
    let l_ss = ssim_loss(&rec.image, &image, &all)?;
    let (l_delta, mut g_delta) = delta_norms(delta, w.deltas);
    let (l_aiap, g_aiap) = aiap.loss(&hair.posed.cloud.positions)?;
    let mut terms = JointTerms {
        pho: l_pho.value,
        ssim: l_ss.value,
        deltas: l_delta,
        aiap: l_aiap,
        total: 0.0,
        psnr: psnr(&rec.image, &image, None)?,
    };
    terms.total = terms.weighted_total(w);
    if !want_grad {
        return Ok((terms, None));
    }
    let g_img: Vec<[f64; 3]> = l_pho
        .grad
        .iter()
        .zip(&l_ss.grad)
        .map(|(a, s)| [0, 1, 2].map(|c| w.p * a[c] + w.ssim * s[c]))
        .collect();
    let b = &hair.splat.buffers;
    let cg = composite_premultiplied_backward(&head.face.image, &b.alpha, &hair.maps.soft, &g_img);
    let textures = avatar
        .textures
        .decode_backward(&avatar.decoder, &head.face, &cg.head)?;
    let opts = avatar.settings.splat;
    let cloud_grads = splat_backward(
        &hair.posed.cloud,
        cam,
        &opts,
        &hair.splat,
        &cg.color,
        &cg.alpha,
    )?;
    for (g, a) in g_delta.positions.iter_mut().zip(&g_aiap) {
        *g += a * w.aiap;
    }
    let field = field.backward(trace, &cloud_grads, Some(&g_delta))?;
    Ok((terms, Some(JointGrads { field, textures })))
}

/// Mean full-image PSNR of the avatar's renders over `records`.
pub fn evaluate_frames(avatar: &Avatar, records: &[&FrameRecord]) -> Result<f64> {
    check_records(records)?;
    let rig = avatar.rig()?;
    let mut sum = 0.0;
    for r in records {
        let f = avatar.render_frame(&rig, &r.params, &r.camera)?;
        sum += psnr(&r.image, &f.image, None)?;
    }
    Ok(sum / records.len() as f64)
}

pub(crate) const JOINT_COLUMNS: [&str; 9] = [
    "iter", "frame", "view", "pho", "ssim", "deltas", "aiap", "total", "psnr",
];

/// Optimises the deformation field (created zero-initialised if absent) and the
/// three texture components; the decoder, displacement and canonical hair stay fixed.
pub fn train_joint(
    avatar: &mut Avatar,
    records: &[&FrameRecord],
    cfg: &TrainConfig,
) -> Result<StageLog> {
    cfg.validate()?;
    let j = &cfg.joint;
    let train: Vec<&FrameRecord> = records
        .iter()
        .copied()
        .filter(|r| Some(r.frame) != j.held_out)
        .collect();
    check_records(&train)?;
    let hair = avatar
        .hair
        .as_ref()
        .ok_or_else(|| Error::Config("joint stage needs a canonical hair cloud".into()))?;
    if avatar.field.is_none() {
        avatar.field = Some(DeformationField::new(
            hair.len(),
            hair.sh_stride(),
            j.n_psi,
            j.embed_dim,
            j.hidden,
            cfg.seed ^ 0xdef0,
        ));
    }
    let rig = avatar.rig()?;
    let transforms = frame_transforms(avatar, &rig, records)?;
    let n_frames = transforms.keys().next_back().map_or(0, |k| k + 1);
    avatar.frame_transforms = (0..n_frames)
        .map(|f| transforms.get(&f).cloned().unwrap_or_default())
        .collect();
    let mut log = StageLog::new(&JOINT_COLUMNS);
    if j.iters == 0 {
        return Ok(log);
    }
    let aiap = AiapGraph::new(&hair.positions, j.aiap_k)?;
    let field = avatar.field.as_ref().expect("field present");
    let mut opt_mlp = Adam::new(field.mlp.param_count(), j.lr_field);
    let mut opt_emb = Adam::new(field.embeddings.len(), j.lr_field);
    let t = &avatar.textures;
    let mut opt_di = Adam::new(t.diffuse.data.len(), j.lr_texture);
    let mut opt_v = Adam::new(t.view.coeffs.len(), j.lr_texture);
    let mut opt_dy = Adam::new(t.dynamic.basis.len(), j.lr_texture);
    let mut sched = Schedule::new(train.len(), cfg.seed ^ 0x3c11);
    for it in 0..j.iters {
        let rec = train[sched.next()];
        let tf = &transforms[&rec.frame];
        let (terms, g) = joint_objective(avatar, &rig, rec, tf, &aiap, &cfg.weights, true)?;
        let g = g.expect("gradients requested");
        let field = avatar.field.as_mut().expect("field present");
        let mut p = field.mlp.params();
        opt_mlp.step(&mut p, &g.field.mlp)?;
        field.mlp.set_params(&p);
        opt_emb.step(&mut field.embeddings, &g.field.embeddings)?;
        let t = &mut avatar.textures;
        opt_di.step(&mut t.diffuse.data, &g.textures.diffuse)?;
        opt_v.step(&mut t.view.coeffs, &g.textures.view)?;
        opt_dy.step(&mut t.dynamic.basis, &g.textures.dynamic)?;
        log.push(vec![
            it as f64,
            rec.frame as f64,
            rec.view as f64,
            terms.pho,
            terms.ssim,
            terms.deltas,
            terms.aiap,
            terms.total,
            terms.psnr,
        ]);
    }
    avatar.snap_f32();
    let last = log.column("psnr").unwrap_or_default();
    let tail = &last[last.len().saturating_sub(50)..];
    info!(
        "joint stage: {} iters, recent psnr {:.2} dB",
        j.iters,
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    );
    Ok(log)
}
