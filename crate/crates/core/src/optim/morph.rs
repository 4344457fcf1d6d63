//! Exact Euclidean distance transform and disk erosion of binary masks.

use crate::imaging::{MaskImage, ScalarImage};

/// 1-D squared distance transform of sampled function `f` (lower envelope of parabolas).
fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        match first {
            None => {
                first = Some(q);
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                k = 0;
            }
            Some(_) => loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                    / (2.0 * (q as f64 - p as f64));
                if s <= z[k] && k > 0 {
                    k -= 1;
                    continue;
                }
                if s <= z[k] {
                    // k == 0 and the new parabola dominates everywhere.
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            },
        }
    }
    if first.is_none() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Euclidean distance (pixels) from each pixel to the nearest set pixel; zero on
/// the mask, `+inf` everywhere if the mask is empty.
pub fn distance_transform(mask: &MaskImage) -> ScalarImage {
    let (w, h) = mask.dims();
    let mut g: Vec<f64> = mask
        .data
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = g[y * w + x];
        }
        dt_1d(&col, &mut col_out);
        for y in 0..h {
            g[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        dt_1d(&g[y * w..(y + 1) * w], &mut row_out);
        g[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    ScalarImage {
        width: w,
        height: h,
        data: g.into_iter().map(f64::sqrt).collect(),
    }
}

/// Min-filter with a disk of `radius` pixels; pixels outside the image count as set.
pub fn erode(mask: &MaskImage, radius: f64) -> MaskImage {
    let holes = MaskImage {
        width: mask.width,
        height: mask.height,
        data: mask.data.iter().map(|b| !b).collect(),
    };
    let d = distance_transform(&holes);
    MaskImage {
        width: mask.width,
        height: mask.height,
        data: d.data.iter().map(|&v| v > radius).collect(),
    }
}
