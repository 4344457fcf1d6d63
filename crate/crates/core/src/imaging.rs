//! Plain row-major image buffers shared by every render stage.

use crate::error::{param_err, Result};

/// RGB image with linear `[0, 1]` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

/// Single channel float map (depth, alpha, soft masks, distance fields).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Channel-planar copy, used by the windowed metrics.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().map(|p| p[c]).collect()
    }

    /// Copy with every pixel outside `mask` set to black.
    pub fn masked(&self, mask: &MaskImage) -> ColorImage {
        let data = self
            .data
            .iter()
            .zip(&mask.data)
            .map(|(p, &m)| if m { *p } else { [0.0; 3] })
            .collect();
        ColorImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

impl ScalarImage {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

impl MaskImage {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn union(&self, other: &MaskImage) -> MaskImage {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a || b)
            .collect();
        MaskImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn to_scalar(&self) -> ScalarImage {
        let data = self
            .data
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect();
        ScalarImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Threshold a scalar map (`value >= threshold`).
    pub fn from_threshold(img: &ScalarImage, threshold: f64) -> MaskImage {
        let data = img.data.iter().map(|&v| v >= threshold).collect();
        MaskImage {
            width: img.width,
            height: img.height,
            data,
        }
    }
}

pub(crate) fn check_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return param_err(format!("{what}: dimension mismatch {a:?} vs {b:?}"));
    }
    Ok(())
}
