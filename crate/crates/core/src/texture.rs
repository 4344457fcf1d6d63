//! Disentangled latent textures and per-pixel colour decoding.
//!
//! The composed latent at a surface point is `T_di(uv) + T_v(uv; d) + T_dy(uv; psi)`:
//! a free diffuse grid, a per-texel degree-1 spherical-harmonic model in the view
//! direction `d`, and a per-texel linear basis in the expression coefficients. A small
//! MLP maps `[latent, u, v]` to RGB.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::imaging::ColorImage;
use crate::io::Blob;
use crate::micronet::{Activation, Mlp, MlpTrace};
use crate::raster::{RasterBuffers, Vec3};
use crate::sampling::{bilinear_taps, Taps};

/// `width x height` texels with `channels` values each, texel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl LatentGrid {
    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        LatentGrid {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn texel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn taps(&self, uv: [f64; 2]) -> Taps {
        bilinear_taps(uv, self.width, self.height)
    }

    /// Bilinear lookup; the tap weights are the derivative w.r.t. the grid values.
    pub fn sample_uv(&self, uv: [f64; 2]) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.accumulate(&self.taps(uv), &mut out);
        out
    }

    fn accumulate(&self, taps: &Taps, out: &mut [f64]) {
        for &(t, w) in taps {
            let src = &self.data[t * self.channels..(t + 1) * self.channels];
            out.iter_mut().zip(src).for_each(|(o, s)| *o += w * s);
        }
    }

    /// Adds `grad * w` for every tap into a gradient buffer shaped like `data`.
    pub fn scatter(&self, taps: &Taps, grad: &[f64], dst: &mut [f64]) {
        for &(t, w) in taps {
            let d = &mut dst[t * self.channels..(t + 1) * self.channels];
            d.iter_mut().zip(grad).for_each(|(a, g)| *a += w * g);
        }
    }
}

/// Per-texel `c0 + c1 d_x + c2 d_y + c3 d_z`, coefficients laid out `[texel][channel][4]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewModel {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub coeffs: Vec<f64>,
}

/// Result of normalizing a view direction; `renormalized` flags inputs that were off
/// the unit sphere by more than 1e-6.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewDir {
    pub basis: [f64; 4],
    pub renormalized: bool,
}

pub fn view_basis(d: &Vec3) -> ViewDir {
    let n = d.norm();
    let renormalized = (n - 1.0).abs() > 1e-6;
    let u = if renormalized && n > 0.0 { d / n } else { *d };
    ViewDir {
        basis: [1.0, u.x, u.y, u.z],
        renormalized,
    }
}

impl ViewModel {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        ViewModel {
            width,
            height,
            channels,
            coeffs: vec![0.0; width * height * channels * 4],
        }
    }

    /// Full-grid contribution for one view direction.
    pub fn eval(&self, d: &Vec3) -> (LatentGrid, bool) {
        let vd = view_basis(d);
        let data = self
            .coeffs
            .chunks_exact(4)
            .map(|c| dot4(c, &vd.basis))
            .collect();
        (
            LatentGrid {
                width: self.width,
                height: self.height,
                channels: self.channels,
                data,
            },
            vd.renormalized,
        )
    }

    fn accumulate(&self, taps: &Taps, basis: &[f64; 4], out: &mut [f64]) {
        let c = self.channels;
        for &(t, w) in taps {
            for (ch, o) in out.iter_mut().enumerate() {
                let k = (t * c + ch) * 4;
                *o += w * dot4(&self.coeffs[k..k + 4], basis);
            }
        }
    }

    fn scatter(&self, taps: &Taps, basis: &[f64; 4], grad: &[f64], dst: &mut [f64]) {
        let c = self.channels;
        for &(t, w) in taps {
            for (ch, g) in grad.iter().enumerate() {
                let k = (t * c + ch) * 4;
                for j in 0..4 {
                    dst[k + j] += w * g * basis[j];
                }
            }
        }
    }
}

#[inline]
fn dot4(a: &[f64], b: &[f64; 4]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

/// Per-texel `sum_k psi_k basis_k`, laid out `[texel][channel][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicModel {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub k: usize,
    pub basis: Vec<f64>,
}

impl DynamicModel {
    pub fn zeros(width: usize, height: usize, channels: usize, k: usize) -> Self {
        DynamicModel {
            width,
            height,
            channels,
            k,
            basis: vec![0.0; width * height * channels * k],
        }
    }

    fn weights<'a>(&self, psi: &'a [f64]) -> Result<&'a [f64]> {
        if psi.len() < self.k {
            return param_err(format!(
                "dynamic texture uses {} coefficients but psi has {}",
                self.k,
                psi.len()
            ));
        }
        Ok(&psi[..self.k])
    }

    pub fn eval(&self, psi: &[f64]) -> Result<LatentGrid> {
        let w = self.weights(psi)?;
        let data = if self.k == 0 {
            vec![0.0; self.width * self.height * self.channels]
        } else {
            self.basis
                .chunks_exact(self.k)
                .map(|b| b.iter().zip(w).map(|(x, y)| x * y).sum())
                .collect()
        };
        Ok(LatentGrid {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data,
        })
    }

    fn accumulate(&self, taps: &Taps, w: &[f64], out: &mut [f64]) {
        let (c, k) = (self.channels, self.k);
        for &(t, tw) in taps {
            for (ch, o) in out.iter_mut().enumerate() {
                let b = &self.basis[(t * c + ch) * k..(t * c + ch + 1) * k];
                *o += tw * b.iter().zip(w).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }

    fn scatter(&self, taps: &Taps, w: &[f64], grad: &[f64], dst: &mut [f64]) {
        let (c, k) = (self.channels, self.k);
        for &(t, tw) in taps {
            for (ch, g) in grad.iter().enumerate() {
                let b = &mut dst[(t * c + ch) * k..(t * c + ch + 1) * k];
                b.iter_mut().zip(w).for_each(|(a, wk)| *a += tw * g * wk);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureConfig {
    pub resolution: usize,
    pub coarse_resolution: usize,
    pub channels: usize,
    pub dynamic_k: usize,
}

impl Default for TextureConfig {
    fn default() -> Self {
        TextureConfig {
            resolution: 1024,
            coarse_resolution: 256,
            channels: 4,
            dynamic_k: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextureStack {
    pub diffuse: LatentGrid,
    pub view: ViewModel,
    pub dynamic: DynamicModel,
}

/// Gradients shaped like the corresponding parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureGrads {
    pub diffuse: Vec<f64>,
    pub view: Vec<f64>,
    pub dynamic: Vec<f64>,
    pub decoder: Vec<f64>,
}

/// Decoded face image plus what the reverse pass needs.
#[derive(Clone, Debug)]
pub struct FaceDecode {
    pub image: ColorImage,
    /// Covered pixel indices in row-major order; row `i` of the decoder batch.
    pub pixels: Vec<usize>,
    pub diffuse_only: bool,
    trace: MlpTrace,
    view_basis: Vec<[f64; 4]>,
    psi: Vec<f64>,
    uvs: Vec<[f64; 2]>,
}

/// Default decoder: `[latent, u, v] -> 16 relu -> 16 relu -> 3 sigmoid`, final layer
/// zeroed so a fresh decoder outputs mid-gray everywhere.
pub fn default_decoder(channels: usize, seed: u64) -> Mlp {
    let mut m = Mlp::init(
        &[channels + 2, 16, 16, 3],
        &[Activation::Relu, Activation::Relu, Activation::Sigmoid],
        seed,
    );
    m.zero_last_layer();
    m
}

impl TextureStack {
    /// Zero latents; with [`default_decoder`] this decodes to 0.5 gray.
    pub fn new(cfg: &TextureConfig) -> Result<Self> {
        if cfg.resolution == 0 || cfg.coarse_resolution == 0 || cfg.channels == 0 {
            return param_err("texture resolutions and channel count must be positive");
        }
        let (r, rc, c) = (cfg.resolution, cfg.coarse_resolution, cfg.channels);
        Ok(TextureStack {
            diffuse: LatentGrid::filled(r, r, c, 0.0),
            view: ViewModel::zeros(rc, rc, c),
            dynamic: DynamicModel::zeros(rc, rc, c, cfg.dynamic_k),
        })
    }

    pub fn channels(&self) -> usize {
        self.diffuse.channels
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.diffuse.channels;
        if self.view.channels != c || self.dynamic.channels != c {
            return param_err("texture stack channel counts disagree");
        }
        let ok = self.diffuse.data.len() == self.diffuse.width * self.diffuse.height * c
            && self.view.coeffs.len() == self.view.width * self.view.height * c * 4
            && self.dynamic.basis.len()
                == self.dynamic.width * self.dynamic.height * c * self.dynamic.k;
        if !ok {
            return param_err("texture array lengths do not match their dimensions");
        }
        if self
            .diffuse
            .data
            .iter()
            .chain(&self.view.coeffs)
            .chain(&self.dynamic.basis)
            .any(|v| !v.is_finite())
        {
            return param_err("texture stack has non-finite values");
        }
        Ok(())
    }

    /// Composed latent at one surface point.
    pub fn latent(
        &self,
        uv: [f64; 2],
        view: &[f64; 4],
        psi: &[f64],
        diffuse_only: bool,
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels()];
        self.diffuse.accumulate(&self.diffuse.taps(uv), &mut out);
        if !diffuse_only {
            self.view.accumulate(
                &bilinear_taps(uv, self.view.width, self.view.height),
                view,
                &mut out,
            );
            let w = self.dynamic.weights(psi)?;
            self.dynamic.accumulate(
                &bilinear_taps(uv, self.dynamic.width, self.dynamic.height),
                w,
                &mut out,
            );
        }
        Ok(out)
    }

    /// Decodes every covered pixel of `raster`; `dirs` holds one view direction per
    /// pixel (only covered entries are read). Uncovered pixels stay black.
    pub fn decode_face(
        &self,
        raster: &RasterBuffers,
        dirs: &[Vec3],
        psi: &[f64],
        pix: &Mlp,
        diffuse_only: bool,
    ) -> Result<FaceDecode> {
        self.validate()?;
        let c = self.channels();
        if pix.in_dim() != c + 2 || pix.out_dim() != 3 {
            return param_err(format!(
                "decoder maps {} -> {}, expected {} -> 3",
                pix.in_dim(),
                pix.out_dim(),
                c + 2
            ));
        }
        let n = raster.width * raster.height;
        if dirs.len() != n {
            return param_err("one view direction per pixel is required");
        }
        if !diffuse_only {
            self.dynamic.weights(psi)?;
        }
        let pixels: Vec<usize> = (0..n).filter(|&i| raster.covered(i)).collect();
        let uvs: Vec<[f64; 2]> = pixels.iter().map(|&i| raster.uv[i]).collect();
        let view_basis: Vec<[f64; 4]> =
            pixels.iter().map(|&i| view_basis(&dirs[i]).basis).collect();
        let rows: Vec<Vec<f64>> = (0..pixels.len())
            .into_par_iter()
            .map(|r| {
                let mut row = self
                    .latent(uvs[r], &view_basis[r], psi, diffuse_only)
                    .expect("psi checked");
                row.extend_from_slice(&uvs[r]);
                row
            })
            .collect();
        let (out, trace) = pix.forward(&rows.concat(), pixels.len())?;
        let mut image = ColorImage::new(raster.width, raster.height);
        for (r, &i) in pixels.iter().enumerate() {
            image.data[i] = [out[3 * r], out[3 * r + 1], out[3 * r + 2]];
        }
        Ok(FaceDecode {
            image,
            pixels,
            diffuse_only,
            trace,
            view_basis,
            psi: psi.to_vec(),
            uvs,
        })
    }

    /// Reverse pass of [`decode_face`](Self::decode_face) given `dL/dimage`.
    pub fn decode_backward(
        &self,
        pix: &Mlp,
        fwd: &FaceDecode,
        grad_image: &[[f64; 3]],
    ) -> Result<TextureGrads> {
        let c = self.channels();
        let g_out: Vec<f64> = fwd.pixels.iter().flat_map(|&i| grad_image[i]).collect();
        let (decoder, g_in) = pix.backward(&fwd.trace, &g_out)?;
        let mut grads = TextureGrads {
            diffuse: vec![0.0; self.diffuse.data.len()],
            view: vec![
                0.0;
                if fwd.diffuse_only {
                    0
                } else {
                    self.view.coeffs.len()
                }
            ],
            dynamic: vec![
                0.0;
                if fwd.diffuse_only {
                    0
                } else {
                    self.dynamic.basis.len()
                }
            ],
            decoder,
        };
        // Serial scatter in pixel order keeps the sums bit-reproducible.
        for (r, row) in g_in.chunks_exact(c + 2).enumerate() {
            let g = &row[..c];
            let uv = fwd.uvs[r];
            self.diffuse
                .scatter(&self.diffuse.taps(uv), g, &mut grads.diffuse);
            if !fwd.diffuse_only {
                let tv = bilinear_taps(uv, self.view.width, self.view.height);
                self.view
                    .scatter(&tv, &fwd.view_basis[r], g, &mut grads.view);
                let td = bilinear_taps(uv, self.dynamic.width, self.dynamic.height);
                self.dynamic
                    .scatter(&td, &fwd.psi[..self.dynamic.k], g, &mut grads.dynamic);
            }
        }
        Ok(grads)
    }

    /// Diffuse texture decoded at every texel centre, for inspection.
    pub fn decode_diffuse_texture(&self, pix: &Mlp) -> Result<ColorImage> {
        let (w, h) = (self.diffuse.width, self.diffuse.height);
        let c = self.channels();
        let mut rows = Vec::with_capacity(w * h * (c + 2));
        for y in 0..h {
            for x in 0..w {
                rows.extend_from_slice(self.diffuse.texel(x, y));
                rows.push((x as f64 + 0.5) / w as f64);
                rows.push((y as f64 + 0.5) / h as f64);
            }
        }
        let (out, _) = pix.forward(&rows, w * h)?;
        let mut img = ColorImage::new(w, h);
        img.data
            .iter_mut()
            .zip(out.chunks_exact(3))
            .for_each(|(p, o)| *p = [o[0], o[1], o[2]]);
        Ok(img)
    }

    pub fn to_blob(&self) -> Blob {
        let mut b = Blob::new("texture_stack");
        let c = self.channels();
        b.set_meta("dynamic_k", self.dynamic.k);
        b.push_f64(
            "diffuse",
            &[self.diffuse.height, self.diffuse.width, c],
            &self.diffuse.data,
        );
        b.push_f64(
            "view",
            &[self.view.height, self.view.width, c, 4],
            &self.view.coeffs,
        );
        b.push_f64(
            "dynamic",
            &[self.dynamic.height, self.dynamic.width, c, self.dynamic.k],
            &self.dynamic.basis,
        );
        b
    }

    pub fn from_blob(b: &Blob) -> Result<Self> {
        let k = b.meta_usize("dynamic_k")?;
        let (sd, diffuse) = b.f64_array("diffuse")?;
        let (sv, view) = b.f64_array("view")?;
        let (sy, dynamic) = b.f64_array("dynamic")?;
        if sd.len() != 3 || sv.len() != 4 || sy.len() != 4 {
            return Err(Error::Format("texture array ranks are wrong".into()));
        }
        let s = TextureStack {
            diffuse: LatentGrid {
                width: sd[1],
                height: sd[0],
                channels: sd[2],
                data: diffuse,
            },
            view: ViewModel {
                width: sv[1],
                height: sv[0],
                channels: sv[2],
                coeffs: view,
            },
            dynamic: DynamicModel {
                width: sy[1],
                height: sy[0],
                channels: sy[2],
                k,
                basis: dynamic,
            },
        };
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::Layer;
    use crate::raster::NO_FACE;

    fn ramp_grid(w: usize, h: usize, c: usize) -> LatentGrid {
        let data = (0..w * h * c)
            .map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0)
            .collect();
        LatentGrid {
            width: w,
            height: h,
            channels: c,
            data,
        }
    }

    fn cfg() -> TextureConfig {
        TextureConfig {
            resolution: 8,
            coarse_resolution: 4,
            channels: 4,
            dynamic_k: 3,
        }
    }

    fn random_stack(seed: u64) -> TextureStack {
        let mut s = TextureStack::new(&cfg()).unwrap();
        let f = |i: usize| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64) / 500.0 - 1.0;
        s.diffuse
            .data
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = f(i));
        s.view
            .coeffs
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = 0.3 * f(i + 7));
        s.dynamic
            .basis
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = 0.5 * f(i + 13));
        s
    }

    /// 4 x 3 buffer with a few covered pixels at scattered uvs.
    fn buffers() -> (RasterBuffers, Vec<Vec3>) {
        let mut rb = RasterBuffers::empty(4, 3);
        for (i, uv) in [
            (0, [0.1, 0.2]),
            (5, [0.55, 0.5]),
            (6, [0.9, 0.95]),
            (11, [0.33, 0.71]),
        ] {
            rb.face[i] = 0;
            rb.uv[i] = uv;
        }
        let dirs = (0..12)
            .map(|i| Vec3::new(0.1 * i as f64, -0.2, 1.0).normalize())
            .collect();
        (rb, dirs)
    }

    #[test]
    fn sample_uv_examples() {
        let g = ramp_grid(5, 4, 2);
        assert_eq!(g.sample_uv([2.5 / 5.0, 1.5 / 4.0]), g.texel(2, 1).to_vec());
        let c = LatentGrid::filled(6, 6, 3, 0.7);
        for uv in [[0.0, 0.0], [0.31, 0.77], [1.0, 0.5]] {
            c.sample_uv(uv)
                .iter()
                .for_each(|v| assert!((v - 0.7).abs() < 1e-15));
        }
        let mid = g.sample_uv([2.0 / 5.0, 1.5 / 4.0]);
        for ch in 0..2 {
            assert!((mid[ch] - 0.5 * (g.texel(1, 1)[ch] + g.texel(2, 1)[ch])).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_uv_gradient_matches_fd() {
        let g = ramp_grid(5, 4, 2);
        let uv = [0.437, 0.61];
        let wts = [0.8, -1.3];
        let taps = g.taps(uv);
        let mut grad = vec![0.0; g.data.len()];
        g.scatter(&taps, &wts, &mut grad);
        let f = |g: &LatentGrid| {
            g.sample_uv(uv)
                .iter()
                .zip(&wts)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let h = 1e-5;
        for i in 0..g.data.len() {
            let mut gp = g.clone();
            gp.data[i] += h;
            let mut gm = g.clone();
            gm.data[i] -= h;
            let fd = (f(&gp) - f(&gm)) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(
                err < 1e-6 || (fd - grad[i]).abs() < 1e-10,
                "texel value {i}: {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn view_texture_examples() {
        let mut m = ViewModel::zeros(3, 2, 2);
        let d = Vec3::new(0.0, 0.6, 0.8);
        assert!(m.eval(&d).0.data.iter().all(|&v| v == 0.0));
        for (i, c) in m.coeffs.chunks_exact_mut(4).enumerate() {
            c[0] = i as f64;
        }
        let a = m.eval(&d).0;
        let b = m.eval(&Vec3::new(1.0, 0.0, 0.0)).0;
        assert_eq!(a, b);
        for (i, c) in m.coeffs.chunks_exact_mut(4).enumerate() {
            c[0] = 0.0;
            c[1] = 0.1 * i as f64;
            c[2] = -0.3;
            c[3] = 0.7;
        }
        let p = m.eval(&d).0;
        let n = m.eval(&-d).0;
        p.data
            .iter()
            .zip(&n.data)
            .for_each(|(x, y)| assert!((x + y).abs() < 1e-15));
        let (_, flag) = m.eval(&Vec3::new(0.0, 0.0, 2.0));
        assert!(flag);
        assert!(!m.eval(&d).1);
    }

    #[test]
    fn dynamic_texture_examples() {
        let mut m = DynamicModel::zeros(2, 2, 2, 3);
        m.basis
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = i as f64 * 0.25 - 1.0);
        assert!(m.eval(&[0.0; 5]).unwrap().data.iter().all(|&v| v == 0.0));
        let e1 = m.eval(&[1.0, 0.0, 0.0]).unwrap();
        let want: Vec<f64> = m.basis.chunks_exact(3).map(|b| b[0]).collect();
        assert_eq!(e1.data, want);
        let psi = [0.3, -0.2, 0.9];
        let a = m.eval(&psi).unwrap();
        let b = m.eval(&psi.map(|p| 2.0 * p)).unwrap();
        a.data
            .iter()
            .zip(&b.data)
            .for_each(|(x, y)| assert!((2.0 * x - y).abs() < 1e-14));
        assert!(m.eval(&[1.0]).is_err());
    }

    #[test]
    fn fresh_stack_decodes_mid_gray() {
        let s = TextureStack::new(&cfg()).unwrap();
        let (rb, dirs) = buffers();
        let out = s
            .decode_face(&rb, &dirs, &[0.0; 3], &default_decoder(4, 5), false)
            .unwrap();
        for i in 0..12 {
            let want = if rb.face[i] == NO_FACE { 0.0 } else { 0.5 };
            assert_eq!(out.image.data[i], [want; 3]);
        }
    }

    #[test]
    fn zero_weight_decoder_gives_constant_color() {
        let s = random_stack(1);
        let bias = vec![0.3, -0.4, 1.1];
        let pix = Mlp::new(vec![Layer {
            in_dim: 6,
            out_dim: 3,
            weights: vec![0.0; 18],
            bias: bias.clone(),
            activation: Activation::Sigmoid,
        }])
        .unwrap();
        let (rb, dirs) = buffers();
        let out = s
            .decode_face(&rb, &dirs, &[0.2, 0.1, 0.0], &pix, false)
            .unwrap();
        let want: Vec<f64> = bias.iter().map(|b| 1.0 / (1.0 + (-b).exp())).collect();
        for &i in &out.pixels {
            assert_eq!(out.image.data[i].to_vec(), want);
        }
    }

    #[test]
    fn diffuse_only_ignores_view_and_expression() {
        let s = random_stack(2);
        let pix = Mlp::init(
            &[6, 16, 16, 3],
            &[Activation::Relu, Activation::Relu, Activation::Sigmoid],
            3,
        );
        let (rb, dirs) = buffers();
        let flipped: Vec<Vec3> = dirs.iter().map(|d| -d).collect();
        let a = s
            .decode_face(&rb, &dirs, &[0.5, 0.2, -0.3], &pix, true)
            .unwrap();
        let b = s
            .decode_face(&rb, &flipped, &[-1.0, 0.0, 2.0], &pix, true)
            .unwrap();
        assert_eq!(a.image, b.image);
        let c = s
            .decode_face(&rb, &dirs, &[0.5, 0.2, -0.3], &pix, false)
            .unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn empty_coverage_is_black() {
        let s = random_stack(3);
        let rb = RasterBuffers::empty(5, 5);
        let dirs = vec![Vec3::z(); 25];
        let out = s
            .decode_face(&rb, &dirs, &[0.0; 3], &default_decoder(4, 1), false)
            .unwrap();
        assert!(out.image.data.iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let s = random_stack(3);
        let (rb, dirs) = buffers();
        assert!(matches!(
            s.decode_face(&rb, &dirs, &[0.0; 3], &default_decoder(3, 1), false),
            Err(Error::Parameter(_))
        ));
        let mut bad = s.clone();
        bad.view.channels = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn composed_stack_equals_presummed_grid() {
        // Same resolution everywhere so the composed grid is representable exactly.
        let c = TextureConfig {
            resolution: 4,
            coarse_resolution: 4,
            channels: 4,
            dynamic_k: 3,
        };
        let mut s = TextureStack::new(&c).unwrap();
        let r = random_stack(4);
        let n = s.diffuse.data.len();
        s.diffuse.data.copy_from_slice(&r.diffuse.data[..n]);
        s.view.coeffs.copy_from_slice(&r.view.coeffs);
        s.dynamic.basis.copy_from_slice(&r.dynamic.basis);
        let pix = Mlp::init(
            &[6, 16, 16, 3],
            &[Activation::Relu, Activation::Relu, Activation::Sigmoid],
            8,
        );
        let mut rb = RasterBuffers::empty(4, 3);
        rb.face.iter_mut().for_each(|f| *f = 0);
        rb.uv
            .iter_mut()
            .enumerate()
            .for_each(|(i, uv)| *uv = [(i as f64 * 0.083) % 1.0, (i as f64 * 0.131) % 1.0]);
        let d = Vec3::new(0.2, -0.1, 1.0).normalize();
        let dirs = vec![d; 12];
        let psi = [0.4, -0.7, 0.2];
        let a = s.decode_face(&rb, &dirs, &psi, &pix, false).unwrap();
        let mut summed = s.clone();
        let v = s.view.eval(&d).0;
        let y = s.dynamic.eval(&psi).unwrap();
        for i in 0..summed.diffuse.data.len() {
            summed.diffuse.data[i] += v.data[i] + y.data[i];
        }
        let b = summed.decode_face(&rb, &dirs, &psi, &pix, true).unwrap();
        for (p, q) in a.image.data.iter().zip(&b.image.data) {
            for ch in 0..3 {
                assert!((p[ch] - q[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_backward_matches_fd() {
        let s = random_stack(5);
        let mut pix = Mlp::init(&[6, 8, 3], &[Activation::Tanh, Activation::Sigmoid], 6);
        let p: Vec<f64> = pix.params().iter().map(|v| v * 2.0).collect();
        pix.set_params(&p);
        let (rb, dirs) = buffers();
        let psi = [0.6, -0.4, 0.9];
        let wimg: Vec<[f64; 3]> = (0..12)
            .map(|i| {
                [
                    (i as f64).sin(),
                    (i as f64 * 0.7).cos(),
                    0.3 - 0.05 * i as f64,
                ]
            })
            .collect();
        let loss = |s: &TextureStack, pix: &Mlp| -> f64 {
            let out = s.decode_face(&rb, &dirs, &psi, pix, false).unwrap();
            out.image
                .data
                .iter()
                .zip(&wimg)
                .map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
                .sum()
        };
        let fwd = s.decode_face(&rb, &dirs, &psi, &pix, false).unwrap();
        let g = s.decode_backward(&pix, &fwd, &wimg).unwrap();
        let h = 1e-5;
        let check = |fd: f64, an: f64, what: &str| {
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(
                err < 1e-6 || (fd - an).abs() < 1e-10,
                "{what}: fd {fd} analytic {an}"
            );
        };
        for i in 0..s.diffuse.data.len() {
            let (mut a, mut b) = (s.clone(), s.clone());
            a.diffuse.data[i] += h;
            b.diffuse.data[i] -= h;
            check(
                (loss(&a, &pix) - loss(&b, &pix)) / (2.0 * h),
                g.diffuse[i],
                "diffuse",
            );
        }
        for i in 0..s.view.coeffs.len() {
            let (mut a, mut b) = (s.clone(), s.clone());
            a.view.coeffs[i] += h;
            b.view.coeffs[i] -= h;
            check(
                (loss(&a, &pix) - loss(&b, &pix)) / (2.0 * h),
                g.view[i],
                "view",
            );
        }
        for i in 0..s.dynamic.basis.len() {
            let (mut a, mut b) = (s.clone(), s.clone());
            a.dynamic.basis[i] += h;
            b.dynamic.basis[i] -= h;
            check(
                (loss(&a, &pix) - loss(&b, &pix)) / (2.0 * h),
                g.dynamic[i],
                "dynamic",
            );
        }
        for i in 0..p.len() {
            let (mut a, mut b) = (pix.clone(), pix.clone());
            let mut q = p.clone();
            q[i] += h;
            a.set_params(&q);
            q[i] -= 2.0 * h;
            b.set_params(&q);
            check(
                (loss(&s, &a) - loss(&s, &b)) / (2.0 * h),
                g.decoder[i],
                "decoder",
            );
        }
    }

    #[test]
    fn decode_is_deterministic() {
        let s = random_stack(6);
        let pix = Mlp::init(&[6, 16, 3], &[Activation::Relu, Activation::Sigmoid], 2);
        let (rb, dirs) = buffers();
        let a = s
            .decode_face(&rb, &dirs, &[0.1, 0.2, 0.3], &pix, false)
            .unwrap();
        let b = s
            .decode_face(&rb, &dirs, &[0.1, 0.2, 0.3], &pix, false)
            .unwrap();
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn blob_round_trip() {
        let mut s = random_stack(7);
        crate::io::snap_slice(&mut s.diffuse.data);
        crate::io::snap_slice(&mut s.view.coeffs);
        crate::io::snap_slice(&mut s.dynamic.basis);
        let back =
            TextureStack::from_blob(&Blob::from_bytes(&s.to_blob().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn decoded_diffuse_texture_size() {
        let s = TextureStack::new(&cfg()).unwrap();
        let img = s.decode_diffuse_texture(&default_decoder(4, 0)).unwrap();
        assert_eq!(img.dims(), (8, 8));
        assert!(img.data.iter().all(|p| *p == [0.5; 3]));
    }
}
