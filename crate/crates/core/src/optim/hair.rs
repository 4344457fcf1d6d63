//! Hair stage: canonical Gaussian hair from the views of one frame.

use log::info;

use super::adam::Adam;
use super::losses::{photometric, ssim_loss, HairMaskMaps};
use super::metrics::psnr;
use super::{check_records, FrameRecord, LossWeights, Schedule, StageLog, TrainConfig};
use crate::avatar::{Avatar, HeadRender, RenderSettings};
use crate::blend::{blend_maps, composite_premultiplied, composite_premultiplied_backward};
use crate::error::{Error, Result};
use crate::imaging::{ColorImage, ScalarImage};
use crate::raster::{Camera, Vec3};
use crate::splat::{
    init_from_scalp, prune_transparent, render_splats, splat_backward, CloudGrads, GaussianCloud,
};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HairTerms {
    pub pho: f64,
    pub ssim: f64,
    pub silhouette: f64,
    pub solid: f64,
    pub total: f64,
    /// PSNR of the composite under the hair mask.
    pub psnr: f64,
}

impl HairTerms {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.p * self.pho + w.ssim * self.ssim + w.silhouette * self.silhouette + w.solid * self.solid
    }
}

/// Hair objective of one view with the head layer held fixed.
#[derive(Clone, Debug)]
pub struct HairObjective {
    pub camera: Camera,
    pub target: ColorImage,
    pub masks: HairMaskMaps,
    pub head: ColorImage,
    pub mesh_depth: ScalarImage,
}

impl HairObjective {
    pub fn new(rec: &FrameRecord, head: &HeadRender) -> Result<Self> {
        if rec.hair_mask.count() == 0 {
            return Err(Error::Config(format!(
                "frame {} view {} has no hair pixels",
                rec.frame, rec.view
            )));
        }
        Ok(HairObjective {
            camera: rec.camera.clone(),
            target: rec.image.clone(),
            masks: HairMaskMaps::new(&rec.hair_mask),
            head: head.face.image.clone(),
            mesh_depth: head.raster.depth.clone(),
        })
    }

    pub fn eval(
        &self,
        cloud: &GaussianCloud,
        settings: &RenderSettings,
        w: &LossWeights,
        want_grad: bool,
    ) -> Result<(HairTerms, Option<CloudGrads>)> {
        let opts = settings.splat;
        let splat = render_splats(cloud, &self.camera, &opts)?;
        let b = &splat.buffers;
        let maps = blend_maps(
            b.hair_depth(opts.depth_mode),
            &self.mesh_depth,
            &b.alpha,
            settings.blur_sigma,
        )?;
        let image = composite_premultiplied(&b.color, &self.head, &b.alpha, &maps.soft)?;
        let mask = &self.masks.mask;
        let l_pho = photometric(&self.target, &image, mask)?;
        let l_ss = ssim_loss(&self.target, &image, mask)?;
        let (sil, g_sil) = self.masks.silhouette(&maps.hair_alpha)?;
        let (sol, g_sol) = self.masks.solid(&maps.hair_alpha)?;
        let mut terms = HairTerms {
            pho: l_pho.value,
            ssim: l_ss.value,
            silhouette: sil,
            solid: sol,
            total: 0.0,
            psnr: psnr(&self.target, &image, Some(mask))?,
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
        let cg = composite_premultiplied_backward(&self.head, &b.alpha, &maps.soft, &g_img);
        let g_alpha: Vec<f64> = (0..g_img.len())
            .map(|i| {
                cg.alpha[i] + (w.silhouette * g_sil[i] + w.solid * g_sol[i]) * maps.soft.data[i]
            })
            .collect();
        let grads = splat_backward(cloud, &self.camera, &opts, &splat, &cg.color, &g_alpha)?;
        Ok((terms, Some(grads)))
    }
}

/// Seeds the canonical hair on the scalp of the canonical posed mesh.
pub fn init_hair(avatar: &Avatar, cfg: &TrainConfig) -> Result<GaussianCloud> {
    let posed = avatar.head.lbs_deform(&avatar.canonical)?;
    let h = &cfg.hair;
    init_from_scalp(
        &posed,
        &avatar.head.scalp,
        h.n_gaussians,
        h.shell,
        h.sh_degree,
        cfg.seed ^ 0x4a17,
    )
}

fn flatten3(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflatten3(src: &[f64], dst: &mut [Vec3]) {
    dst.iter_mut()
        .zip(src.chunks_exact(3))
        .for_each(|(d, s)| *d = Vec3::new(s[0], s[1], s[2]));
}

/// Per-attribute Adam state for a Gaussian cloud.
pub(crate) struct CloudOptimizer {
    pos: Adam,
    rot: Adam,
    scale: Adam,
    opacity: Adam,
    sh: Adam,
    stride: usize,
}

impl CloudOptimizer {
    pub(crate) fn new(cloud: &GaussianCloud, h: &super::HairStageConfig, extent: f64) -> Self {
        let n = cloud.len();
        CloudOptimizer {
            pos: Adam::new(3 * n, h.lr_position * extent),
            rot: Adam::new(4 * n, h.lr_rotation),
            scale: Adam::new(3 * n, h.lr_scale),
            opacity: Adam::new(n, h.lr_opacity),
            sh: Adam::new(n * cloud.sh_stride(), h.lr_sh),
            stride: cloud.sh_stride(),
        }
    }

    pub(crate) fn step(&mut self, cloud: &mut GaussianCloud, g: &CloudGrads) -> Result<()> {
        let mut p = flatten3(&cloud.positions);
        self.pos.step(&mut p, &flatten3(&g.positions))?;
        unflatten3(&p, &mut cloud.positions);
        let mut p = flatten3(&cloud.log_scales);
        self.scale.step(&mut p, &flatten3(&g.log_scales))?;
        unflatten3(&p, &mut cloud.log_scales);
        let mut p: Vec<f64> = cloud.rotations.iter().flatten().copied().collect();
        let gr: Vec<f64> = g.rotations.iter().flatten().copied().collect();
        self.rot.step(&mut p, &gr)?;
        cloud
            .rotations
            .iter_mut()
            .zip(p.chunks_exact(4))
            .for_each(|(q, s)| q.copy_from_slice(s));
        cloud.renormalize_rotations();
        self.opacity
            .step(&mut cloud.opacity_logits, &g.opacity_logits)?;
        self.sh.step(&mut cloud.sh, &g.sh)?;
        Ok(())
    }

    pub(crate) fn retain(&mut self, keep: &[usize]) {
        self.pos.retain(keep, 3);
        self.rot.retain(keep, 4);
        self.scale.retain(keep, 3);
        self.opacity.retain(keep, 1);
        self.sh.retain(keep, self.stride);
    }
}

pub(crate) const HAIR_COLUMNS: [&str; 9] = [
    "iter",
    "view",
    "pho",
    "ssim",
    "silhouette",
    "solid",
    "total",
    "psnr",
    "n_gaussians",
];

/// Optimises the canonical hair against the views of `cfg.hair.frame`, whose
/// parameters must equal the avatar's canonical parameters. Seeds the hair on the
/// scalp if the avatar has none.
pub fn train_hair(
    avatar: &mut Avatar,
    records: &[&FrameRecord],
    cfg: &TrainConfig,
) -> Result<StageLog> {
    cfg.validate()?;
    let h = &cfg.hair;
    let views: Vec<&FrameRecord> = records
        .iter()
        .copied()
        .filter(|r| r.frame == h.frame)
        .collect();
    check_records(&views)?;
    if views.iter().any(|r| r.params != avatar.canonical) {
        return Err(Error::Config(
            "hair-stage frame parameters must equal the canonical parameters".into(),
        ));
    }
    let mut log = StageLog::new(&HAIR_COLUMNS);
    if avatar.hair.is_none() {
        avatar.hair = Some(init_hair(avatar, cfg)?);
        avatar.field = None;
    }
    if h.iters == 0 {
        return Ok(log);
    }
    let rig = avatar.rig()?;
    let objectives: Vec<HairObjective> = views
        .iter()
        .map(|r| HairObjective::new(r, &avatar.render_head(&rig, &r.params, &r.camera, false)?))
        .collect::<Result<_>>()?;
    let extent = if h.extent > 0.0 {
        h.extent
    } else {
        let posed = avatar.head.lbs_deform(&avatar.canonical)?;
        let c = GaussianCloud {
            positions: posed.vertices,
            ..GaussianCloud::new(0)
        };
        2.0 * c.bounding_sphere().1
    };
    let mut cloud = avatar.hair.take().expect("hair present");
    let mut opt = CloudOptimizer::new(&cloud, h, extent);
    let mut sched = Schedule::new(views.len(), cfg.seed ^ 0x6a12);
    let settings = avatar.settings;
    for it in 0..h.iters {
        let k = sched.next();
        let (terms, g) = objectives[k].eval(&cloud, &settings, &cfg.weights, true)?;
        opt.step(&mut cloud, &g.expect("gradients requested"))?;
        if h.prune_every > 0 && (it + 1) % h.prune_every == 0 && it + 1 < h.iters {
            let (pruned, keep) = prune_transparent(&cloud, h.prune_threshold);
            if keep.len() < cloud.len() && !keep.is_empty() {
                opt.retain(&keep);
                cloud = pruned;
            }
        }
        log.push(vec![
            it as f64,
            views[k].view as f64,
            terms.pho,
            terms.ssim,
            terms.silhouette,
            terms.solid,
            terms.total,
            terms.psnr,
            cloud.len() as f64,
        ]);
    }
    if avatar
        .field
        .as_ref()
        .is_some_and(|f| f.n_gaussians() != cloud.len())
    {
        avatar.field = None;
    }
    avatar.hair = Some(cloud);
    avatar.snap_f32();
    let mean = mean_psnr(&objectives, avatar.hair.as_ref().expect("hair"), &settings)?;
    info!("hair stage: {} iters, masked psnr {:.2} dB", h.iters, mean);
    Ok(log)
}

fn mean_psnr(
    objectives: &[HairObjective],
    cloud: &GaussianCloud,
    settings: &RenderSettings,
) -> Result<f64> {
    let mut sum = 0.0;
    for o in objectives {
        sum += o
            .eval(cloud, settings, &LossWeights::default(), false)?
            .0
            .psnr;
    }
    Ok(sum / objectives.len() as f64)
}

/// Mean PSNR of the composite under the hair mask over `records`, with the head
/// layer rendered from the avatar at each record's parameters and the hair posed
/// for them.
pub fn evaluate_hair(avatar: &Avatar, records: &[&FrameRecord]) -> Result<f64> {
    check_records(records)?;
    let rig = avatar.rig()?;
    let mut sum = 0.0;
    for r in records {
        let head = avatar.render_head(&rig, &r.params, &r.camera, false)?;
        let posed = avatar
            .pose_hair(&rig, &r.params)?
            .ok_or_else(|| Error::Config("avatar has no hair".into()))?;
        let o = HairObjective::new(r, &head)?;
        sum += o
            .eval(
                &posed.cloud,
                &avatar.settings,
                &LossWeights::default(),
                false,
            )?
            .0
            .psnr;
    }
    Ok(sum / records.len() as f64)
}
