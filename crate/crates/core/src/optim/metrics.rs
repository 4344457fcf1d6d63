//! PSNR and SSIM over optionally masked colour images.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{check_dims, ColorImage, MaskImage};

/// Reported when the mean squared error is below 1e-10.
pub const PSNR_CAP: f64 = 99.0;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn selected(mask: Option<&MaskImage>, i: usize) -> bool {
    mask.is_none_or(|m| m.data[i])
}

fn check(a: &ColorImage, b: &ColorImage, mask: Option<&MaskImage>) -> Result<usize> {
    check_dims(a.dims(), b.dims(), "metric images")?;
    if let Some(m) = mask {
        check_dims(a.dims(), m.dims(), "metric mask")?;
    }
    let n = (0..a.data.len()).filter(|&i| selected(mask, i)).count();
    if n == 0 {
        return Err(Error::UndefinedMetric(
            "metric mask selects no pixels".into(),
        ));
    }
    Ok(n)
}

/// Mean squared error over selected pixels and all channels.
pub fn mse(a: &ColorImage, b: &ColorImage, mask: Option<&MaskImage>) -> Result<f64> {
    let n = check(a, b, mask)?;
    let s: f64 = (0..a.data.len())
        .filter(|&i| selected(mask, i))
        .map(|i| {
            (0..3)
                .map(|c| (a.data[i][c] - b.data[i][c]).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(s / (3 * n) as f64)
}

/// Peak signal-to-noise ratio for a dynamic range of 1.
pub fn psnr(a: &ColorImage, b: &ColorImage, mask: Option<&MaskImage>) -> Result<f64> {
    let e = mse(a, b, mask)?;
    Ok(if e < 1e-10 {
        PSNR_CAP
    } else {
        -10.0 * e.log10()
    })
}

fn window() -> Vec<f64> {
    let r = SSIM_RADIUS as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable correlation with zero padding.
fn filter(img: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = x as i64 + j as i64 - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * img[y * w + xx as usize];
                }
            }
            *o = s;
        }
    });
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = y as i64 + j as i64 - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            *o = s;
        }
    });
    out
}

/// Mean SSIM and, optionally, its gradient w.r.t. `b`. Both images are multiplied by
/// the mask before windowing and the SSIM map is averaged over selected pixels.
pub fn ssim_with_grad(
    a: &ColorImage,
    b: &ColorImage,
    mask: Option<&MaskImage>,
    want_grad: bool,
) -> Result<(f64, Option<Vec<[f64; 3]>>)> {
    let n = check(a, b, mask)?;
    let (w, h) = a.dims();
    let k = window();
    let inv_n = 1.0 / (3 * n) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![[0.0; 3]; w * h]);
    for c in 0..3 {
        let pick = |img: &ColorImage| -> Vec<f64> {
            (0..w * h)
                .map(|i| {
                    if selected(mask, i) {
                        img.data[i][c]
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let x = pick(a);
        let y = pick(b);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter(&x, w, h, &k), filter(&y, w, h, &k));
        let (exx, eyy, exy) = (
            filter(&xx, w, h, &k),
            filter(&yy, w, h, &k),
            filter(&xy, w, h, &k),
        );
        let mut g_mu = vec![0.0; w * h];
        let mut g_e = vec![0.0; w * h];
        let mut g_x = vec![0.0; w * h];
        for p in 0..w * h {
            if !selected(mask, p) {
                continue;
            }
            let (ux, uy) = (mx[p], my[p]);
            let sxx = exx[p] - ux * ux;
            let syy = eyy[p] - uy * uy;
            let sxy = exy[p] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                g_mu[p] = inv_n
                    * ((2.0 * ux * a2 - 2.0 * ux * a1) / (b1 * b2)
                        - s * (2.0 * uy / b1 - 2.0 * uy / b2));
                g_e[p] = inv_n * (-s / b2);
                g_x[p] = inv_n * (2.0 * a1 / (b1 * b2));
            }
        }
        if let Some(gr) = grad.as_mut() {
            let (f_mu, f_e, f_x) = (
                filter(&g_mu, w, h, &k),
                filter(&g_e, w, h, &k),
                filter(&g_x, w, h, &k),
            );
            for q in 0..w * h {
                if selected(mask, q) {
                    gr[q][c] = f_mu[q] + 2.0 * y[q] * f_e[q] + x[q] * f_x[q];
                }
            }
        }
    }
    Ok((total * inv_n, grad))
}

pub fn ssim(a: &ColorImage, b: &ColorImage, mask: Option<&MaskImage>) -> Result<f64> {
    Ok(ssim_with_grad(a, b, mask, false)?.0)
}

/// `1 - SSIM`.
pub fn dssim(a: &ColorImage, b: &ColorImage, mask: Option<&MaskImage>) -> Result<f64> {
    Ok(1.0 - ssim(a, b, mask)?)
}
