//! Hair transfer between avatars and texture painting.

use log::warn;

use super::adam::Adam;
use super::losses::photometric;
use super::EditConfig;
use crate::align::{icp, IcpOptions, IcpResult, RigidTransform};
use crate::avatar::{Avatar, FaceRig};
use crate::blend::composite_premultiplied_backward;
use crate::error::{param_err, Error, Result};
use crate::geometry::ExpressionParams;
use crate::imaging::{ColorImage, MaskImage};
use crate::raster::{Camera, Vec3};
use crate::splat::apply_rigid;
use crate::texture::TextureGrads;

fn canonical_scalp(a: &Avatar) -> Result<Vec<Vec3>> {
    let posed = a.head.lbs_deform(&a.canonical)?;
    Ok(a.head
        .scalp
        .iter()
        .map(|&s| posed.vertices[s as usize])
        .collect())
}

/// Moves `donor`'s canonical hair (and deformation field) onto `face`: a similarity
/// ICP aligns the donor's canonical scalp to the face avatar's.
pub fn swap_hair(face: &Avatar, donor: &Avatar) -> Result<(Avatar, IcpResult)> {
    let hair = donor
        .hair
        .as_ref()
        .ok_or_else(|| Error::Config("donor avatar has no hair".into()))?;
    let opts = IcpOptions {
        with_scale: true,
        ..IcpOptions::default()
    };
    let fit =
        icp(&canonical_scalp(donor)?, &canonical_scalp(face)?, &opts).map_err(|e| match e {
            Error::RankDeficient(m) => Error::Alignment(m),
            other => other,
        })?;
    let mut out = face.clone();
    out.hair = Some(apply_rigid(hair, &fit.transform));
    out.field = donor.field.clone();
    Ok((out, fit))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditReport {
    /// Texels of the diffuse map that were allowed to change.
    pub uv_mask: MaskImage,
    /// Painted-view photometric loss after each step.
    pub losses: Vec<f64>,
    /// The paint mask was empty and nothing was done.
    pub skipped: bool,
}

/// Texel index of a uv coordinate in a `w x h` grid.
fn texel_of(uv: [f64; 2], w: usize, h: usize) -> usize {
    let x = ((uv[0] * w as f64).floor().max(0.0) as usize).min(w - 1);
    let y = ((uv[1] * h as f64).floor().max(0.0) as usize).min(h - 1);
    y * w + x
}

fn dilate(mask: &MaskImage, r: usize) -> MaskImage {
    let (w, h) = mask.dims();
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.data[y * w + x] {
                for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                    for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                        out.data[yy * w + xx] = true;
                    }
                }
            }
        }
    }
    out
}

struct View {
    camera: Camera,
    params: ExpressionParams,
    transform: RigidTransform,
    target: ColorImage,
    mask: MaskImage,
}

fn view_grads(avatar: &Avatar, rig: &FaceRig, v: &View) -> Result<(f64, TextureGrads)> {
    let f = avatar.render_frame_with(rig, &v.params, &v.camera, &v.transform)?;
    let l = photometric(&v.target, &f.image, &v.mask)?;
    let head_grad = match &f.hair {
        Some(h) => {
            composite_premultiplied_backward(
                &f.head.face.image,
                &h.splat.buffers.alpha,
                &h.maps.soft,
                &l.grad,
            )
            .head
        }
        None => l.grad,
    };
    Ok((
        l.value,
        avatar
            .textures
            .decode_backward(&avatar.decoder, &f.head.face, &head_grad)?,
    ))
}

/// Fits the diffuse texture (only texels under the painted region) and the pixel
/// decoder to a painted render. Other views are held to their pre-edit renders
/// outside the painted texels.
pub fn edit_texture(
    avatar: &mut Avatar,
    painted: &ColorImage,
    paint_mask: &MaskImage,
    camera: &Camera,
    params: &ExpressionParams,
    others: &[(Camera, ExpressionParams)],
    cfg: &EditConfig,
) -> Result<EditReport> {
    let (tw, th) = (
        avatar.textures.diffuse.width,
        avatar.textures.diffuse.height,
    );
    if painted.dims() != (camera.width, camera.height) || paint_mask.dims() != painted.dims() {
        return param_err("painted image and mask must match the camera size");
    }
    if paint_mask.count() == 0 {
        warn!("texture edit: empty paint mask, nothing to do");
        return Ok(EditReport {
            uv_mask: MaskImage::filled(tw, th, false),
            losses: vec![],
            skipped: true,
        });
    }
    let rig = avatar.rig()?;
    let head = avatar.render_head(&rig, params, camera, false)?;
    let mut uv_mask = MaskImage::filled(tw, th, false);
    for i in 0..paint_mask.data.len() {
        if paint_mask.data[i] && head.raster.covered(i) {
            uv_mask.data[texel_of(head.raster.uv[i], tw, th)] = true;
        }
    }
    let uv_mask = dilate(&uv_mask, cfg.dilate);
    let mut views = vec![View {
        camera: camera.clone(),
        params: params.clone(),
        transform: avatar.hair_transform(&rig, params)?,
        target: painted.clone(),
        mask: MaskImage::filled(camera.width, camera.height, true),
    }];
    for (cam, p) in others {
        let transform = avatar.hair_transform(&rig, p)?;
        let f = avatar.render_frame_with(&rig, p, cam, &transform)?;
        let mask = MaskImage {
            width: cam.width,
            height: cam.height,
            data: (0..cam.pixel_count())
                .map(|i| {
                    !(f.head.raster.covered(i)
                        && uv_mask.data[texel_of(f.head.raster.uv[i], tw, th)])
                })
                .collect(),
        };
        views.push(View {
            camera: cam.clone(),
            params: p.clone(),
            transform,
            target: f.image,
            mask,
        });
    }
    let c = avatar.textures.channels();
    let mut opt_di = Adam::new(avatar.textures.diffuse.data.len(), cfg.lr_texture);
    let mut opt_pix = Adam::new(avatar.decoder.param_count(), cfg.lr_decoder);
    let mut losses = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let mut g_di = vec![0.0; avatar.textures.diffuse.data.len()];
        let mut g_pix = vec![0.0; avatar.decoder.param_count()];
        for (k, v) in views.iter().enumerate() {
            let (loss, g) = view_grads(avatar, &rig, v)?;
            if k == 0 {
                losses.push(loss);
            }
            g_di.iter_mut().zip(&g.diffuse).for_each(|(a, b)| *a += b);
            g_pix.iter_mut().zip(&g.decoder).for_each(|(a, b)| *a += b);
        }
        for (t, chunk) in g_di.chunks_exact_mut(c).enumerate() {
            if !uv_mask.data[t] {
                chunk.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        opt_di.step(&mut avatar.textures.diffuse.data, &g_di)?;
        let mut p = avatar.decoder.params();
        opt_pix.step(&mut p, &g_pix)?;
        avatar.decoder.set_params(&p);
    }
    Ok(EditReport {
        uv_mask,
        losses,
        skipped: false,
    })
}
