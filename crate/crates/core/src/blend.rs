//! Occlusion-aware compositing of the hair layer over the head layer.

use rayon::prelude::*;

use crate::error::{param_err, Result};
use crate::imaging::{check_dims, ColorImage, MaskImage, ScalarImage};

/// `nearz < mesh_depth` per pixel. `+inf` hair depth never occludes; finite hair
/// over `+inf` mesh depth always does.
pub fn occlusion_mask(hair_depth: &ScalarImage, mesh_depth: &ScalarImage) -> Result<MaskImage> {
    check_dims(hair_depth.dims(), mesh_depth.dims(), "occlusion depths")?;
    Ok(MaskImage {
        width: hair_depth.width,
        height: hair_depth.height,
        data: hair_depth
            .data
            .iter()
            .zip(&mesh_depth.data)
            .map(|(h, m)| h < m)
            .collect(),
    })
}

fn kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable normalized Gaussian blur, radius `ceil(3 sigma)`, edge-clamped.
pub fn gaussian_blur(img: &ScalarImage, sigma: f64) -> Result<ScalarImage> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return param_err("blur sigma must be a finite non-negative number");
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let k = kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = img.dims();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            *out = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * img.data[y * w + clamp(x as i64 + j as i64 - r, w)])
                .sum();
        }
    });
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            *o = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp(y as i64 + j as i64 - r, h) * w + x])
                .sum();
        }
    });
    Ok(ScalarImage {
        width: w,
        height: h,
        data: out,
    })
}

/// `Î = Â Î_hair + (1 - Â) Î_head` with `Â = A_g * soft`.
pub fn composite(
    hair: &ColorImage,
    head: &ColorImage,
    alpha: &ScalarImage,
    soft: &ScalarImage,
) -> Result<ColorImage> {
    check_dims(hair.dims(), head.dims(), "composite images")?;
    check_dims(hair.dims(), alpha.dims(), "hair alpha")?;
    check_dims(hair.dims(), soft.dims(), "soft mask")?;
    let data = (0..hair.data.len())
        .map(|i| {
            let a = alpha.data[i] * soft.data[i];
            let (p, q) = (hair.data[i], head.data[i]);
            [0, 1, 2].map(|c| a * p[c] + (1.0 - a) * q[c])
        })
        .collect();
    Ok(ColorImage {
        width: hair.width,
        height: hair.height,
        data,
    })
}

/// Same blend with alpha-premultiplied hair colour `C = A_g Î_hair`:
/// `Î = soft C + (1 - A_g soft) Î_head`.
pub fn composite_premultiplied(
    color: &ColorImage,
    head: &ColorImage,
    alpha: &ScalarImage,
    soft: &ScalarImage,
) -> Result<ColorImage> {
    check_dims(color.dims(), head.dims(), "composite images")?;
    check_dims(color.dims(), alpha.dims(), "hair alpha")?;
    check_dims(color.dims(), soft.dims(), "soft mask")?;
    let data = (0..color.data.len())
        .map(|i| {
            let s = soft.data[i];
            let a = alpha.data[i] * s;
            let (p, q) = (color.data[i], head.data[i]);
            [0, 1, 2].map(|c| s * p[c] + (1.0 - a) * q[c])
        })
        .collect();
    Ok(ColorImage {
        width: color.width,
        height: color.height,
        data,
    })
}

/// Gradients of [`composite_premultiplied`] w.r.t. its colour, alpha and head inputs.
pub struct CompositeGrads {
    pub color: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
    pub head: Vec<[f64; 3]>,
}

pub fn composite_premultiplied_backward(
    head: &ColorImage,
    alpha: &ScalarImage,
    soft: &ScalarImage,
    grad: &[[f64; 3]],
) -> CompositeGrads {
    let n = grad.len();
    let mut out = CompositeGrads {
        color: vec![[0.0; 3]; n],
        alpha: vec![0.0; n],
        head: vec![[0.0; 3]; n],
    };
    for i in 0..n {
        let s = soft.data[i];
        let a = alpha.data[i] * s;
        let g = grad[i];
        out.color[i] = g.map(|v| v * s);
        out.head[i] = g.map(|v| v * (1.0 - a));
        out.alpha[i] =
            -s * (g[0] * head.data[i][0] + g[1] * head.data[i][1] + g[2] * head.data[i][2]);
    }
    out
}

/// `C / A_g` where `A_g > 0`, black elsewhere.
pub fn unpremultiply(color: &ColorImage, alpha: &ScalarImage) -> ColorImage {
    let data = color
        .data
        .iter()
        .zip(&alpha.data)
        .map(|(c, &a)| {
            if a > 0.0 {
                c.map(|v| (v / a).clamp(0.0, 1.0))
            } else {
                [0.0; 3]
            }
        })
        .collect();
    ColorImage {
        width: color.width,
        height: color.height,
        data,
    }
}

/// The three per-pixel maps that define the hair layer's weight.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendMaps {
    pub occlusion: MaskImage,
    pub soft: ScalarImage,
    pub hair_alpha: ScalarImage,
}

/// Blurs the occlusion mask, then multiplies by the accumulated hair alpha.
pub fn blend_maps(
    hair_depth: &ScalarImage,
    mesh_depth: &ScalarImage,
    alpha: &ScalarImage,
    sigma: f64,
) -> Result<BlendMaps> {
    check_dims(alpha.dims(), hair_depth.dims(), "hair alpha")?;
    let occlusion = occlusion_mask(hair_depth, mesh_depth)?;
    let soft = gaussian_blur(&occlusion.to_scalar(), sigma)?;
    let hair_alpha = ScalarImage {
        width: alpha.width,
        height: alpha.height,
        data: alpha
            .data
            .iter()
            .zip(&soft.data)
            .map(|(a, s)| a * s)
            .collect(),
    };
    Ok(BlendMaps {
        occlusion,
        soft,
        hair_alpha,
    })
}
