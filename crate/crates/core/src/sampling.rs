//! Bilinear texel lookup with texel-centre convention.
//!
//! Texel `(row, col)` of a `width x height` grid sits at
//! `uv = ((col + 0.5) / width, (row + 0.5) / height)`. Coordinates are clamped to
//! `[0, 1]^2` and then to the outermost texel centres, so lookups never read outside
//! the grid.

/// Four `(texel index, weight)` pairs; weights sum to one.
pub type Taps = [(usize, f64); 4];

pub fn bilinear_taps(uv: [f64; 2], width: usize, height: usize) -> Taps {
    let u = uv[0].clamp(0.0, 1.0);
    let v = uv[1].clamp(0.0, 1.0);
    let x = (u * width as f64 - 0.5).clamp(0.0, (width - 1) as f64);
    let y = (v * height as f64 - 0.5).clamp(0.0, (height - 1) as f64);
    let x0 = (x.floor() as usize).min(width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    [
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one_and_hit_centres() {
        let taps = bilinear_taps([0.3, 0.8], 7, 5);
        let s: f64 = taps.iter().map(|t| t.1).sum();
        assert!((s - 1.0).abs() < 1e-15);
        // texel (2, 3) centre
        let taps = bilinear_taps([3.5 / 7.0, 2.5 / 5.0], 7, 5);
        let w: f64 = taps.iter().filter(|t| t.0 == 2 * 7 + 3).map(|t| t.1).sum();
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_texel_grid() {
        let taps = bilinear_taps([0.9, 0.1], 1, 1);
        let w: f64 = taps.iter().filter(|t| t.0 == 0).map(|t| t.1).sum();
        assert!((w - 1.0).abs() < 1e-15);
    }
}
