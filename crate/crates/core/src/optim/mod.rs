//! Losses, metrics, the Adam optimiser, the three training stages and the editing
//! operations.

pub mod adam;
pub mod edit;
pub mod face;
pub mod hair;
pub mod joint;
pub mod losses;
pub mod metrics;
pub mod morph;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use edit::{edit_texture, swap_hair, EditReport};
pub use face::{depth_mae, evaluate_face, face_objective, train_face, FaceSummary, FaceTerms};
pub use hair::{evaluate_hair, init_hair, train_hair, HairObjective, HairTerms};
pub use joint::{evaluate_frames, frame_transforms, joint_objective, train_joint, JointTerms};
pub use losses::{AiapGraph, HairMaskMaps};
pub use metrics::{dssim, mse, psnr, ssim};

use crate::error::{param_err, Error, Result};
use crate::geometry::ExpressionParams;
use crate::imaging::{ColorImage, MaskImage, ScalarImage};
use crate::raster::Camera;

/// Weights of every loss term. The diffuse-only photometric term always uses `3 p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub p: f64,
    pub ssim: f64,
    pub depth: f64,
    pub normal: f64,
    pub shrink: f64,
    pub lap: f64,
    pub nc: f64,
    pub el: f64,
    pub silhouette: f64,
    pub solid: f64,
    pub aiap: f64,
    /// Weight of the deformation-offset magnitudes in the joint stage.
    pub deltas: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            p: 1.0,
            ssim: 0.2,
            depth: 0.1,
            normal: 0.05,
            shrink: 1e-3,
            lap: 10.0,
            nc: 0.1,
            el: 1.0,
            silhouette: 0.01,
            solid: 0.1,
            aiap: 1.0,
            deltas: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.p,
            self.ssim,
            self.depth,
            self.normal,
            self.shrink,
            self.lap,
            self.nc,
            self.el,
            self.silhouette,
            self.solid,
            self.aiap,
            self.deltas,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaceStageConfig {
    pub iters: usize,
    pub lr_texture: f64,
    pub lr_displacement: f64,
    pub lr_decoder: f64,
    pub depth_delta: f64,
}

impl Default for FaceStageConfig {
    fn default() -> Self {
        FaceStageConfig {
            iters: 2000,
            lr_texture: 5e-3,
            lr_displacement: 1e-5,
            lr_decoder: 1e-4,
            depth_delta: 0.005,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HairStageConfig {
    pub iters: usize,
    /// Index of the frame whose views supervise the canonical hair.
    pub frame: usize,
    pub n_gaussians: usize,
    pub shell: f64,
    pub sh_degree: usize,
    /// Position learning rate per unit of scene extent.
    pub lr_position: f64,
    /// Scene extent; `0` uses the diameter of the head's bounding sphere.
    pub extent: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_sh: f64,
    /// Drop near-transparent Gaussians every this many steps; `0` disables.
    pub prune_every: usize,
    pub prune_threshold: f64,
}

impl Default for HairStageConfig {
    fn default() -> Self {
        HairStageConfig {
            iters: 2000,
            frame: 0,
            n_gaussians: 400,
            shell: 0.015,
            sh_degree: 1,
            lr_position: 1.6e-4,
            extent: 0.0,
            lr_opacity: 5e-2,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_sh: 2.5e-3,
            prune_every: 500,
            prune_threshold: 0.005,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointStageConfig {
    pub iters: usize,
    pub lr_field: f64,
    pub lr_texture: f64,
    pub n_psi: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub aiap_k: usize,
    /// Frame excluded from training (evaluation hold-out).
    pub held_out: Option<usize>,
}

impl Default for JointStageConfig {
    fn default() -> Self {
        JointStageConfig {
            iters: 1000,
            lr_field: 1e-4,
            lr_texture: 5e-3,
            n_psi: 16,
            embed_dim: 8,
            hidden: 64,
            aiap_k: 5,
            held_out: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub iters: usize,
    pub lr_texture: f64,
    pub lr_decoder: f64,
    /// UV mask dilation in texels.
    pub dilate: usize,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            iters: 500,
            lr_texture: 0.01,
            lr_decoder: 1e-4,
            dilate: 1,
        }
    }
}

/// Everything the training stages read; serialised as TOML.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub weights: LossWeights,
    pub face: FaceStageConfig,
    pub hair: HairStageConfig,
    pub joint: JointStageConfig,
    pub edit: EditConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let lrs = [
            self.face.lr_texture,
            self.face.lr_displacement,
            self.face.lr_decoder,
            self.hair.lr_position,
            self.hair.lr_opacity,
            self.hair.lr_scale,
            self.hair.lr_rotation,
            self.hair.lr_sh,
            self.joint.lr_field,
            self.joint.lr_texture,
            self.edit.lr_texture,
            self.edit.lr_decoder,
        ];
        if lrs.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(
                "learning rates must be finite and non-negative".into(),
            ));
        }
        if !(self.face.depth_delta > 0.0) || !(self.hair.shell >= 0.0) || !(self.hair.extent >= 0.0)
        {
            return Err(Error::Config(
                "depth delta must be positive, shell and extent non-negative".into(),
            ));
        }
        if self.hair.sh_degree > 3 || self.hair.n_gaussians == 0 {
            return Err(Error::Config(
                "hair needs SH degree <= 3 and at least one Gaussian".into(),
            ));
        }
        if self.joint.aiap_k == 0 || self.joint.embed_dim == 0 || self.joint.hidden == 0 {
            return Err(Error::Config("joint stage sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One supervised view of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub view: usize,
    pub camera: Camera,
    pub params: ExpressionParams,
    /// Full photo; supervises hair and the joint stage.
    pub image: ColorImage,
    /// Head-only photo; supervises the face stage outside the hair mask.
    pub head_image: ColorImage,
    pub hair_mask: MaskImage,
    pub coverage: MaskImage,
    /// Head depth target; required by the face stage.
    pub depth: Option<ScalarImage>,
}

impl FrameRecord {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let d = (self.camera.width, self.camera.height);
        let ok = self.image.dims() == d
            && self.head_image.dims() == d
            && self.hair_mask.dims() == d
            && self.coverage.dims() == d
            && self.depth.as_ref().is_none_or(|z| z.dims() == d);
        if !ok {
            return param_err(format!(
                "frame {} view {}: buffers differ from the camera size",
                self.frame, self.view
            ));
        }
        Ok(())
    }

    /// Pixels the face stage supervises: head coverage minus hair.
    pub fn face_mask(&self) -> MaskImage {
        MaskImage {
            width: self.coverage.width,
            height: self.coverage.height,
            data: self
                .coverage
                .data
                .iter()
                .zip(&self.hair_mask.data)
                .map(|(c, h)| *c && !h)
                .collect(),
        }
    }
}

/// Per-iteration training log: one named column per loss term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl StageLog {
    pub fn new(columns: &[&str]) -> Self {
        StageLog {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }
}

/// Round-robin order over `n` items, reshuffled every epoch from a seeded stream.
pub(crate) struct Schedule {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Schedule {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        Schedule {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub(crate) fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

pub(crate) fn check_records(records: &[&FrameRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config("no training frames".into()));
    }
    records.iter().try_for_each(|r| r.validate())
}
