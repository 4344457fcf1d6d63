//! The complete avatar: skinned head mesh with displacement and neural texture, plus
//! optional Gaussian hair, and the frame render pipeline that composites them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::{icp, Correspondence, IcpOptions, RigidTransform};
use crate::blend::{blend_maps, composite_premultiplied, BlendMaps};
use crate::error::{param_err, Error, Result};
use crate::geometry::{
    subdivide4, DisplacementModel, ExpressionParams, HeadModel, MeshTopology, TriMesh,
};
use crate::imaging::ColorImage;
use crate::io::{snap_slice, Blob};
use crate::micronet::Mlp;
use crate::raster::{rasterize, Camera, RasterBuffers, Vec3};
use crate::sampling::Taps;
use crate::splat::apply_rigid;
use crate::splat::{
    deform_cloud, read_ply, render_splats, write_ply, DeformTrace, DeformationField, GaussianCloud,
    GaussianDelta, SplatForward, SplatOptions,
};
use crate::texture::{FaceDecode, TextureStack};

const BUNDLE_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.toml";

/// Settings of the compositing stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    pub splat: SplatOptions,
    /// Standard deviation (pixels) of the occlusion-mask blur.
    pub blur_sigma: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            splat: SplatOptions::default(),
            blur_sigma: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Avatar {
    pub head: HeadModel,
    /// Four-way subdivision passes applied to the posed mesh before displacement.
    pub subdivisions: usize,
    pub displacement: DisplacementModel,
    pub textures: TextureStack,
    pub decoder: Mlp,
    /// Canonical hair, expressed in the frame of `canonical` params.
    pub hair: Option<GaussianCloud>,
    pub field: Option<DeformationField>,
    pub canonical: ExpressionParams,
    /// Hair transforms of the training frames, for reference.
    pub frame_transforms: Vec<RigidTransform>,
    pub settings: RenderSettings,
}

/// Topology-dependent data shared by every frame of one avatar.
#[derive(Clone, Debug)]
pub struct FaceRig {
    pub topology: MeshTopology,
    pub uvs: Vec<[f64; 2]>,
    pub taps: Vec<Taps>,
    /// Scalp vertex positions of the canonical posed mesh.
    canonical_scalp: Vec<Vec3>,
}

/// Intermediate state of the mesh branch of a frame render.
#[derive(Clone, Debug)]
pub struct HeadRender {
    /// LBS output before subdivision.
    pub posed: TriMesh,
    /// Subdivided mesh without displacement.
    pub rest: TriMesh,
    /// Subdivided and displaced mesh.
    pub mesh: TriMesh,
    pub raster: RasterBuffers,
    pub face: FaceDecode,
}

/// Hair placed for one frame.
#[derive(Clone, Debug)]
pub struct PosedHair {
    pub cloud: GaussianCloud,
    pub transform: RigidTransform,
    /// Field offsets and trace when a deformation field is present.
    pub deform: Option<(GaussianDelta, DeformTrace)>,
}

#[derive(Clone, Debug)]
pub struct HairRender {
    pub posed: PosedHair,
    pub splat: SplatForward,
    pub maps: BlendMaps,
}

#[derive(Clone, Debug)]
pub struct FrameRender {
    pub head: HeadRender,
    pub hair: Option<HairRender>,
    pub image: ColorImage,
}

impl Avatar {
    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        self.textures.validate()?;
        if self.decoder.in_dim() != self.textures.channels() + 2 || self.decoder.out_dim() != 3 {
            return param_err("pixel decoder shape does not match the texture channels");
        }
        if self.displacement.basis.len() != self.head.n_expr + 3 * self.head.joints.len() {
            return param_err("displacement basis count must equal the conditioning length");
        }
        if let Some(h) = &self.hair {
            h.validate()?;
            if let Some(f) = &self.field {
                if f.n_gaussians() != h.len() {
                    return param_err("deformation field and hair cloud sizes differ");
                }
            }
        } else if self.field.is_some() {
            return param_err("deformation field without a hair cloud");
        }
        self.settings.splat.validate()?;
        if !(self.settings.blur_sigma >= 0.0) {
            return param_err("blur sigma must be non-negative");
        }
        Ok(())
    }

    fn refine_topology(&self, mesh: &TriMesh) -> Result<TriMesh> {
        let mut m = mesh.clone();
        for _ in 0..self.subdivisions {
            m = subdivide4(&m)?;
        }
        Ok(m)
    }

    pub fn rig(&self) -> Result<FaceRig> {
        let rest = self.refine_topology(&self.head.template_mesh())?;
        let posed = self.head.lbs_deform(&self.canonical)?;
        Ok(FaceRig {
            topology: MeshTopology::new(&rest),
            taps: self.displacement.vertex_taps(&rest.uvs),
            uvs: rest.uvs,
            canonical_scalp: self
                .head
                .scalp
                .iter()
                .map(|&s| posed.vertices[s as usize])
                .collect(),
        })
    }

    /// Posed mesh before and after displacement.
    pub fn head_meshes(
        &self,
        rig: &FaceRig,
        params: &ExpressionParams,
    ) -> Result<(TriMesh, TriMesh, TriMesh)> {
        let posed = self.head.lbs_deform(params)?;
        let rest = self.refine_topology(&posed)?;
        if rest.vertices.len() != rig.taps.len() {
            return param_err("face rig does not belong to this avatar");
        }
        let offsets = self
            .displacement
            .vertex_offsets(&rig.taps, &params.conditioning());
        let mut mesh = rest.clone();
        mesh.vertices
            .iter_mut()
            .zip(&offsets)
            .for_each(|(v, o)| *v += o);
        Ok((posed, rest, mesh))
    }

    pub fn render_head(
        &self,
        rig: &FaceRig,
        params: &ExpressionParams,
        camera: &Camera,
        diffuse_only: bool,
    ) -> Result<HeadRender> {
        let (posed, rest, mesh) = self.head_meshes(rig, params)?;
        let raster = rasterize(&mesh, camera)?;
        let dirs = view_dirs(camera);
        let face =
            self.textures
                .decode_face(&raster, &dirs, &params.psi, &self.decoder, diffuse_only)?;
        Ok(HeadRender {
            posed,
            rest,
            mesh,
            raster,
            face,
        })
    }

    /// Rigid hair transform for `params`: scalp vertices of the canonical posed mesh
    /// aligned to those of the posed mesh. Identity when `params` is canonical.
    pub fn hair_transform(
        &self,
        rig: &FaceRig,
        params: &ExpressionParams,
    ) -> Result<RigidTransform> {
        if *params == self.canonical {
            return Ok(RigidTransform::identity());
        }
        let posed = self.head.lbs_deform(params)?;
        let dst: Vec<Vec3> = self
            .head
            .scalp
            .iter()
            .map(|&s| posed.vertices[s as usize])
            .collect();
        let opts = IcpOptions {
            correspondence: Correspondence::Index,
            ..IcpOptions::default()
        };
        Ok(icp(&rig.canonical_scalp, &dst, &opts)?.transform)
    }

    /// Places the canonical hair for a frame with a precomputed rigid transform.
    pub fn pose_hair_with(
        &self,
        transform: &RigidTransform,
        psi: &[f64],
    ) -> Result<Option<PosedHair>> {
        let Some(hair) = &self.hair else {
            return Ok(None);
        };
        let posed = match &self.field {
            Some(field) => {
                let (cloud, delta, trace) = deform_cloud(hair, transform, psi, field)?;
                PosedHair {
                    cloud,
                    transform: *transform,
                    deform: Some((delta, trace)),
                }
            }
            None => PosedHair {
                cloud: apply_rigid(hair, transform),
                transform: *transform,
                deform: None,
            },
        };
        Ok(Some(posed))
    }

    pub fn pose_hair(&self, rig: &FaceRig, params: &ExpressionParams) -> Result<Option<PosedHair>> {
        let t = self.hair_transform(rig, params)?;
        self.pose_hair_with(&t, &params.psi)
    }

    pub fn render_frame(
        &self,
        rig: &FaceRig,
        params: &ExpressionParams,
        camera: &Camera,
    ) -> Result<FrameRender> {
        let t = self.hair_transform(rig, params)?;
        self.render_frame_with(rig, params, camera, &t)
    }

    /// Full frame with an explicit hair transform.
    pub fn render_frame_with(
        &self,
        rig: &FaceRig,
        params: &ExpressionParams,
        camera: &Camera,
        transform: &RigidTransform,
    ) -> Result<FrameRender> {
        let head = self.render_head(rig, params, camera, false)?;
        let Some(posed) = self.pose_hair_with(transform, &params.psi)? else {
            let image = head.face.image.clone();
            return Ok(FrameRender {
                head,
                hair: None,
                image,
            });
        };
        let (hair, image) = self.composite_hair(&head, posed, camera)?;
        Ok(FrameRender {
            head,
            hair: Some(hair),
            image,
        })
    }

    /// Splats posed hair and composites it over a head render.
    pub fn composite_hair(
        &self,
        head: &HeadRender,
        posed: PosedHair,
        camera: &Camera,
    ) -> Result<(HairRender, ColorImage)> {
        let opts = self.settings.splat;
        let splat = render_splats(&posed.cloud, camera, &opts)?;
        let b = &splat.buffers;
        let maps = blend_maps(
            b.hair_depth(opts.depth_mode),
            &head.raster.depth,
            &b.alpha,
            self.settings.blur_sigma,
        )?;
        let image = composite_premultiplied(&b.color, &head.face.image, &b.alpha, &maps.soft)?;
        Ok((HairRender { posed, splat, maps }, image))
    }

    /// Rounds every parameter through f32 so saved bundles reload bit-identically.
    pub fn snap_f32(&mut self) {
        let h = &mut self.head;
        for v in h
            .template
            .iter_mut()
            .chain(h.joints.iter_mut().map(|j| &mut j.rest))
        {
            snap_slice(v.as_mut_slice());
        }
        for uv in h.uvs.iter_mut() {
            snap_slice(uv);
        }
        snap_slice(&mut h.shape_basis);
        snap_slice(&mut h.expr_basis);
        snap_slice(&mut h.skin_weights);
        let mut p = self.displacement.params();
        snap_slice(&mut p);
        self.displacement.set_params(&p);
        snap_slice(&mut self.textures.diffuse.data);
        snap_slice(&mut self.textures.view.coeffs);
        snap_slice(&mut self.textures.dynamic.basis);
        let mut p = self.decoder.params();
        snap_slice(&mut p);
        self.decoder.set_params(&p);
        if let Some(c) = self.hair.as_mut() {
            c.snap_f32();
        }
        if let Some(f) = self.field.as_mut() {
            let mut p = f.mlp.params();
            snap_slice(&mut p);
            f.mlp.set_params(&p);
            snap_slice(&mut f.embeddings);
        }
    }

    /// Writes the bundle directory: a TOML manifest plus one file per component.
    /// `config` is an optional snapshot of the training configuration.
    pub fn save(&self, dir: &Path, config: Option<&str>) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        self.head.to_blob().save(&dir.join("head_model.blob"))?;
        self.displacement
            .to_blob()
            .save(&dir.join("displacement.blob"))?;
        self.textures.to_blob().save(&dir.join("textures.blob"))?;
        self.decoder
            .to_blob("pixel_decoder")
            .save(&dir.join("decoder.blob"))?;
        if let Some(h) = &self.hair {
            write_ply(&dir.join("hair.ply"), h)?;
        }
        if let Some(f) = &self.field {
            f.to_blob().save(&dir.join("field.blob"))?;
        }
        if let Some(c) = config {
            fs::write(dir.join("config.toml"), c)?;
        }
        let manifest = Manifest {
            version: BUNDLE_VERSION,
            subdivisions: self.subdivisions,
            has_hair: self.hair.is_some(),
            has_field: self.field.is_some(),
            settings: self.settings,
            canonical: self.canonical.clone(),
            frame_transforms: self
                .frame_transforms
                .iter()
                .map(|t| t.to_row_major().to_vec())
                .collect(),
        };
        let text =
            toml::to_string(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Avatar> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let m: Manifest =
            toml::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if m.version != BUNDLE_VERSION {
            return Err(Error::Format(format!(
                "unsupported bundle version {}",
                m.version
            )));
        }
        let hair = if m.has_hair {
            Some(read_ply(&dir.join("hair.ply"))?)
        } else {
            None
        };
        let field = if m.has_field {
            Some(DeformationField::from_blob(&Blob::load(
                &dir.join("field.blob"),
            )?)?)
        } else {
            None
        };
        let avatar = Avatar {
            head: HeadModel::load(&dir.join("head_model.blob"))?,
            subdivisions: m.subdivisions,
            displacement: DisplacementModel::from_blob(&Blob::load(
                &dir.join("displacement.blob"),
            )?)?,
            textures: TextureStack::from_blob(&Blob::load(&dir.join("textures.blob"))?)?,
            decoder: Mlp::from_blob(&Blob::load(&dir.join("decoder.blob"))?)?,
            hair,
            field,
            canonical: m.canonical,
            frame_transforms: m
                .frame_transforms
                .iter()
                .map(|r| RigidTransform::from_row_major(r))
                .collect::<Result<_>>()?,
            settings: m.settings,
        };
        avatar.validate()?;
        Ok(avatar)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    subdivisions: usize,
    has_hair: bool,
    has_field: bool,
    settings: RenderSettings,
    canonical: ExpressionParams,
    frame_transforms: Vec<Vec<f64>>,
}

/// Unit world-space view direction of every pixel.
pub fn view_dirs(camera: &Camera) -> Vec<Vec3> {
    (0..camera.pixel_count())
        .map(|i| camera.view_dir(i % camera.width, i / camera.width))
        .collect()
}
