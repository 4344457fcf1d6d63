use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{quat_mul, GaussianCloud, GaussianDelta};
use crate::align::RigidTransform;
use crate::error::{param_err, Error, Result};
use crate::io::Blob;
use crate::micronet::{Activation, Mlp, MlpTrace};
use crate::raster::Vec3;

/// Expression-conditioned per-Gaussian offsets. Each Gaussian's row of the MLP batch
/// is `[psi (first n_psi, zero padded), embedding_i]`; the output row is
/// `[dx(3) dr(4) ds(3) do(1) dsh(..)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub mlp: Mlp,
    /// `[gaussian][embed_dim]`.
    pub embeddings: Vec<f64>,
    pub n_psi: usize,
    pub embed_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrads {
    pub mlp: Vec<f64>,
    pub embeddings: Vec<f64>,
}

/// What [`DeformationField::backward`] needs from [`deform_cloud`].
#[derive(Clone, Debug)]
pub struct DeformTrace {
    mlp: MlpTrace,
    unit_rot: Vec<[f64; 4]>,
    rot_norm: Vec<f64>,
}

impl DeformationField {
    /// `[n_psi + embed_dim] -> hidden relu -> hidden relu -> offsets`, final layer
    /// zeroed so the field starts as the identity.
    pub fn new(
        n_gaussians: usize,
        sh_stride: usize,
        n_psi: usize,
        embed_dim: usize,
        hidden: usize,
        seed: u64,
    ) -> Self {
        let mut mlp = Mlp::init(
            &[n_psi + embed_dim, hidden, hidden, 11 + sh_stride],
            &[Activation::Relu, Activation::Relu, Activation::None],
            seed,
        );
        mlp.zero_last_layer();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e3b0);
        let embeddings = (0..n_gaussians * embed_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        DeformationField {
            mlp,
            embeddings,
            n_psi,
            embed_dim,
        }
    }

    pub fn n_gaussians(&self) -> usize {
        self.embeddings
            .len()
            .checked_div(self.embed_dim)
            .unwrap_or(0)
    }

    fn check(&self, cloud: &GaussianCloud) -> Result<()> {
        if self.mlp.in_dim() != self.n_psi + self.embed_dim {
            return param_err("deformation field input width does not match psi + embedding");
        }
        if self.mlp.out_dim() != 11 + cloud.sh_stride() {
            return param_err(format!(
                "deformation field emits {} values per Gaussian, cloud needs {}",
                self.mlp.out_dim(),
                11 + cloud.sh_stride()
            ));
        }
        if self.n_gaussians() != cloud.len() {
            return param_err("one embedding per Gaussian is required");
        }
        Ok(())
    }

    /// Offsets for every Gaussian at expression `psi`.
    pub fn evaluate(&self, psi: &[f64], sh_stride: usize) -> Result<(GaussianDelta, MlpTrace)> {
        let n = self.n_gaussians();
        let w = self.n_psi + self.embed_dim;
        let mut rows = vec![0.0; n * w];
        let k = psi.len().min(self.n_psi);
        for (i, row) in rows.chunks_exact_mut(w).enumerate() {
            row[..k].copy_from_slice(&psi[..k]);
            row[self.n_psi..]
                .copy_from_slice(&self.embeddings[i * self.embed_dim..(i + 1) * self.embed_dim]);
        }
        let (out, trace) = self.mlp.forward(&rows, n)?;
        let mut d = GaussianDelta::zeros(n, sh_stride);
        for (i, o) in out.chunks_exact(11 + sh_stride).enumerate() {
            d.positions[i] = Vec3::new(o[0], o[1], o[2]);
            d.rotations[i] = [o[3], o[4], o[5], o[6]];
            d.log_scales[i] = Vec3::new(o[7], o[8], o[9]);
            d.opacity_logits[i] = o[10];
            d.sh[i * sh_stride..(i + 1) * sh_stride].copy_from_slice(&o[11..]);
        }
        Ok((d, trace))
    }

    /// Gradients for the MLP and embeddings given `dL/d(deformed cloud)` and,
    /// optionally, direct `dL/d(delta)` from regularizers.
    pub fn backward(
        &self,
        trace: &DeformTrace,
        cloud_grads: &GaussianDelta,
        delta_grads: Option<&GaussianDelta>,
    ) -> Result<FieldGrads> {
        let n = self.n_gaussians();
        if cloud_grads.len() != n || delta_grads.is_some_and(|d| d.len() != n) {
            return param_err("gradient arrays do not match the Gaussian count");
        }
        let stride = cloud_grads.sh.len() / n.max(1);
        let ow = 11 + stride;
        let mut g = vec![0.0; n * ow];
        for (i, row) in g.chunks_exact_mut(ow).enumerate() {
            let q = &trace.unit_rot[i];
            let gr = &cloud_grads.rotations[i];
            let radial: f64 = q.iter().zip(gr).map(|(a, b)| a * b).sum();
            row[0..3].copy_from_slice(cloud_grads.positions[i].as_slice());
            for k in 0..4 {
                row[3 + k] = (gr[k] - q[k] * radial) / trace.rot_norm[i];
            }
            row[7..10].copy_from_slice(cloud_grads.log_scales[i].as_slice());
            row[10] = cloud_grads.opacity_logits[i];
            row[11..].copy_from_slice(&cloud_grads.sh[i * stride..(i + 1) * stride]);
            if let Some(d) = delta_grads {
                for k in 0..3 {
                    row[k] += d.positions[i][k];
                    row[7 + k] += d.log_scales[i][k];
                }
                for k in 0..4 {
                    row[3 + k] += d.rotations[i][k];
                }
                row[10] += d.opacity_logits[i];
                row[11..]
                    .iter_mut()
                    .zip(&d.sh[i * stride..(i + 1) * stride])
                    .for_each(|(a, b)| *a += b);
            }
        }
        let (mlp, gin) = self.mlp.backward(&trace.mlp, &g)?;
        let w = self.n_psi + self.embed_dim;
        let embeddings = gin
            .chunks_exact(w)
            .flat_map(|r| r[self.n_psi..].iter().copied())
            .collect();
        Ok(FieldGrads { mlp, embeddings })
    }

    pub fn to_blob(&self) -> Blob {
        let mut b = self.mlp.to_blob("deformation_field");
        b.set_meta("n_psi", self.n_psi);
        b.set_meta("embed_dim", self.embed_dim);
        b.push_f64(
            "embeddings",
            &[self.n_gaussians(), self.embed_dim],
            &self.embeddings,
        );
        b
    }

    pub fn from_blob(b: &Blob) -> Result<Self> {
        let mlp = Mlp::from_blob(b)?;
        let n_psi = b.meta_usize("n_psi")?;
        let embed_dim = b.meta_usize("embed_dim")?;
        let (_, embeddings) = b.f64_array("embeddings")?;
        if embed_dim == 0 || embeddings.len() % embed_dim != 0 || mlp.in_dim() != n_psi + embed_dim
        {
            return Err(Error::Format(
                "deformation field shapes are inconsistent".into(),
            ));
        }
        Ok(DeformationField {
            mlp,
            embeddings,
            n_psi,
            embed_dim,
        })
    }
}

/// Rigidly moves every Gaussian: centres by the transform, orientations by its
/// rotation, log-scales by `ln(scale)`.
pub fn apply_rigid(canonical: &GaussianCloud, rigid: &RigidTransform) -> GaussianCloud {
    let qr = rigid.quaternion();
    let ls = rigid.scale.ln();
    let mut out = canonical.clone();
    for i in 0..out.len() {
        out.positions[i] = rigid.apply(&canonical.positions[i]);
        out.rotations[i] = quat_mul(&qr, &canonical.rotations[i]);
        out.log_scales[i] = canonical.log_scales[i].add_scalar(ls);
    }
    out
}

/// Rigid transform followed by the field's offsets; rotations are renormalized
/// after the offset is added.
pub fn deform_cloud(
    canonical: &GaussianCloud,
    rigid: &RigidTransform,
    psi: &[f64],
    field: &DeformationField,
) -> Result<(GaussianCloud, GaussianDelta, DeformTrace)> {
    canonical.validate()?;
    field.check(canonical)?;
    let (delta, mlp) = field.evaluate(psi, canonical.sh_stride())?;
    let mut out = apply_rigid(canonical, rigid);
    let mut unit_rot = Vec::with_capacity(out.len());
    let mut rot_norm = Vec::with_capacity(out.len());
    for i in 0..out.len() {
        out.positions[i] += delta.positions[i];
        out.log_scales[i] += delta.log_scales[i];
        out.opacity_logits[i] += delta.opacity_logits[i];
        let mut q = out.rotations[i];
        q.iter_mut()
            .zip(&delta.rotations[i])
            .for_each(|(a, b)| *a += b);
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Parameter(format!(
                "Gaussian {i} rotation collapsed to zero"
            )));
        }
        let u = if n == 1.0 { q } else { q.map(|v| v / n) };
        out.rotations[i] = u;
        unit_rot.push(u);
        rot_norm.push(n);
    }
    out.sh.iter_mut().zip(&delta.sh).for_each(|(a, b)| *a += b);
    Ok((
        out,
        delta,
        DeformTrace {
            mlp,
            unit_rot,
            rot_norm,
        },
    ))
}
