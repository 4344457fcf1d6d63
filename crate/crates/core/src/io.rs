//! On-disk formats.
//!
//! * **Blob container** (head models, MLP checkpoints, texture grids): an ASCII header
//!   followed by raw little-endian arrays, in header order.
//!
//!   ```text
//!   headsplat-blob 1
//!   kind <word>
//!   meta <key> <value...>          (zero or more)
//!   array <name> <f32|u32> <d0> <d1> ...
//!   end_header
//!   <binary payload>
//!   ```
//!
//! * **PFM** single-channel depth (`Pf`, negative scale = little endian, rows stored
//!   bottom to top).
//! * **PNG** 8-bit RGB or grayscale; channel values are quantised with
//!   `round(clamp(v, 0, 1) * 255)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{ColorImage, MaskImage, ScalarImage};

const BLOB_MAGIC: &str = "headsplat-blob 1";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Blob {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<BlobArray>,
}

impl Blob {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("missing meta `{key}`")))?
            .parse()
            .map_err(|_| Error::Format(format!("meta `{key}` is not an integer")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing meta `{key}`")))
    }

    /// Stores `values` as f32; callers keep f32-representable values if they need
    /// lossless round trips.
    pub fn push_f64(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.arrays.push(BlobArray {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: ArrayData::F32(values.iter().map(|&v| v as f32).collect()),
        });
    }

    pub fn push_u32(&mut self, name: &str, shape: &[usize], values: Vec<u32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.arrays.push(BlobArray {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: ArrayData::U32(values),
        });
    }

    fn array(&self, name: &str) -> Result<&BlobArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn f64_array(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let a = self.array(name)?;
        match &a.data {
            ArrayData::F32(v) => Ok((a.shape.clone(), v.iter().map(|&x| x as f64).collect())),
            ArrayData::U32(_) => Err(Error::Format(format!("array `{name}` is not f32"))),
        }
    }

    pub fn u32_array(&self, name: &str) -> Result<(Vec<usize>, Vec<u32>)> {
        let a = self.array(name)?;
        match &a.data {
            ArrayData::U32(v) => Ok((a.shape.clone(), v.clone())),
            ArrayData::F32(_) => Err(Error::Format(format!("array `{name}` is not u32"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        out.push_str(BLOB_MAGIC);
        out.push('\n');
        out.push_str(&format!("kind {}\n", self.kind));
        for (k, v) in &self.meta {
            out.push_str(&format!("meta {k} {v}\n"));
        }
        for a in &self.arrays {
            let ty = match a.data {
                ArrayData::F32(_) => "f32",
                ArrayData::U32(_) => "u32",
            };
            let dims: Vec<String> = a.shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("array {} {} {}\n", a.name, ty, dims.join(" ")));
        }
        out.push_str("end_header\n");
        let mut bytes = out.into_bytes();
        for a in &self.arrays {
            match &a.data {
                ArrayData::F32(v) => v
                    .iter()
                    .for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U32(v) => v
                    .iter()
                    .for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Blob> {
        let mut reader = BufReader::new(bytes);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        if line.trim_end() != BLOB_MAGIC {
            return Err(Error::Format("not a headsplat blob".into()));
        }
        let mut blob = Blob::default();
        let mut specs: Vec<(String, bool, Vec<usize>)> = Vec::new();
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Format("unterminated header".into()));
            }
            let l = line.trim_end();
            if l == "end_header" {
                break;
            }
            let mut parts = l.splitn(2, ' ');
            match (parts.next(), parts.next()) {
                (Some("kind"), Some(rest)) => blob.kind = rest.to_string(),
                (Some("meta"), Some(rest)) => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    blob.meta.insert(k.to_string(), v.to_string());
                }
                (Some("array"), Some(rest)) => {
                    let toks: Vec<&str> = rest.split_whitespace().collect();
                    if toks.len() < 2 {
                        return Err(Error::Format(format!("bad array line `{l}`")));
                    }
                    let is_f32 = match toks[1] {
                        "f32" => true,
                        "u32" => false,
                        other => return Err(Error::Format(format!("unknown dtype `{other}`"))),
                    };
                    let shape = toks[2..]
                        .iter()
                        .map(|t| {
                            t.parse::<usize>()
                                .map_err(|_| Error::Format(format!("bad dim `{t}`")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    specs.push((toks[0].to_string(), is_f32, shape));
                }
                _ => return Err(Error::Format(format!("bad header line `{l}`"))),
            }
        }
        for (name, is_f32, shape) in specs {
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            reader
                .read_exact(&mut raw)
                .map_err(|_| Error::Format(format!("truncated payload for `{name}`")))?;
            let words = raw.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
            let data = if is_f32 {
                ArrayData::F32(words.map(f32::from_le_bytes).collect())
            } else {
                ArrayData::U32(words.map(u32::from_le_bytes).collect())
            };
            blob.arrays.push(BlobArray { name, shape, data });
        }
        Ok(blob)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Blob> {
        Blob::from_bytes(&fs::read(path)?)
    }
}

/// Rounds through f32, the precision every on-disk array uses.
#[inline]
pub fn snap_f32(v: f64) -> f64 {
    v as f32 as f64
}

pub fn snap_slice(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = snap_f32(*v));
}

pub fn write_pfm(path: &Path, img: &ScalarImage) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "Pf\n{} {}\n-1.0\n", img.width, img.height)?;
    let mut buf = Vec::with_capacity(img.data.len() * 4);
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            buf.extend_from_slice(&(img.get(x, y) as f32).to_le_bytes());
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<ScalarImage> {
    let bytes = fs::read(path)?;
    let mut reader = BufReader::new(bytes.as_slice());
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated PFM header".into()));
        }
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    if tokens[0] != "Pf" {
        return Err(Error::Format("only single-channel PFM is supported".into()));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format("bad PFM size".into()))
    };
    let (width, height) = (parse(&tokens[1])?, parse(&tokens[2])?);
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::Format("bad PFM scale".into()))?;
    let mut raw = vec![0u8; width * height * 4];
    reader
        .read_exact(&mut raw)
        .map_err(|_| Error::Format("truncated PFM payload".into()))?;
    let mut data = vec![0.0; width * height];
    for (i, c) in raw.chunks_exact(4).enumerate() {
        let word = [c[0], c[1], c[2], c[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(word)
        } else {
            f32::from_be_bytes(word)
        };
        let (x, row) = (i % width, i / width);
        data[(height - 1 - row) * width + x] = v as f64;
    }
    Ok(ScalarImage {
        width,
        height,
        data,
    })
}

#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(e: image::ImageError) -> Error {
    Error::Format(e.to_string())
}

pub fn write_png_rgb(path: &Path, img: &ColorImage) -> Result<()> {
    let raw: Vec<u8> = img.data.iter().flat_map(|p| p.map(quantize_u8)).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| Error::Format("image buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(image_err)
}

pub fn read_png_rgb(path: &Path) -> Result<ColorImage> {
    let img = image::open(path).map_err(image_err)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| p.0.map(|c| c as f64 / 255.0))
        .collect();
    Ok(ColorImage {
        width: w as usize,
        height: h as usize,
        data,
    })
}

pub fn write_png_gray(path: &Path, img: &ScalarImage) -> Result<()> {
    let raw: Vec<u8> = img.data.iter().map(|&v| quantize_u8(v)).collect();
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| Error::Format("image buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(image_err)
}

pub fn read_png_gray(path: &Path) -> Result<ScalarImage> {
    let img = image::open(path).map_err(image_err)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Ok(ScalarImage {
        width: w as usize,
        height: h as usize,
        data,
    })
}

pub fn write_png_mask(path: &Path, mask: &MaskImage) -> Result<()> {
    write_png_gray(path, &mask.to_scalar())
}

pub fn read_png_mask(path: &Path) -> Result<MaskImage> {
    Ok(MaskImage::from_threshold(&read_png_gray(path)?, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip() {
        let mut b = Blob::new("test");
        b.set_meta("n", 3);
        b.set_meta("note", "two words");
        b.push_f64("a", &[3, 1], &[1.0, -2.5, 0.125]);
        b.push_u32("idx", &[2], vec![7, 9]);
        let back = Blob::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.meta_usize("n").unwrap(), 3);
        assert_eq!(back.meta_str("note").unwrap(), "two words");
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut b = Blob::new("t");
        b.push_f64("a", &[4], &[1.0; 4]);
        let bytes = b.to_bytes();
        assert!(Blob::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn pfm_round_trip_keeps_infinity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let img = ScalarImage {
            width: 3,
            height: 2,
            data: vec![0.5, 1.0, f64::INFINITY, 2.0, 3.25, 4.0],
        };
        write_pfm(&p, &img).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), img);
    }

    #[test]
    fn png_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let img = ColorImage {
            width: 2,
            height: 1,
            data: vec![[0.0, 0.5, 1.0], [1.2, -0.1, 0.25]],
        };
        write_png_rgb(&p, &img).unwrap();
        let back = read_png_rgb(&p).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            for c in 0..3 {
                assert_eq!(quantize_u8(a[c]) as f64 / 255.0, b[c]);
            }
        }
    }
}
