//! Binary little-endian PLY using the common 3DGS attribute names.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{sh_count, GaussianCloud};
use crate::error::{Error, Result};
use crate::raster::Vec3;

fn property_names(degree: usize) -> Vec<String> {
    let rest = 3 * (sh_count(degree) - 1);
    let mut names: Vec<String> = [
        "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2",
    ]
    .map(String::from)
    .to_vec();
    names.extend((0..rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

/// Values are stored as f32. `f_rest` is channel-major as in the reference format.
pub fn write_ply(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    cloud.validate()?;
    let names = property_names(cloud.sh_degree);
    let mut out = Vec::new();
    writeln!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}",
        cloud.len()
    )?;
    for n in &names {
        writeln!(out, "property float {n}")?;
    }
    writeln!(out, "end_header")?;
    let nk = sh_count(cloud.sh_degree);
    for i in 0..cloud.len() {
        let sh = cloud.sh_of(i);
        let mut row: Vec<f64> = cloud.positions[i].iter().copied().collect();
        row.extend([0.0; 3]);
        row.extend(&sh[0..3]);
        for ch in 0..3 {
            row.extend((1..nk).map(|k| sh[k * 3 + ch]));
        }
        row.push(cloud.opacity_logits[i]);
        row.extend(cloud.log_scales[i].iter());
        row.extend(cloud.rotations[i]);
        for v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<GaussianCloud> {
    let bytes = fs::read(path)?;
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::Format("PLY header not terminated".into()))?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Format("PLY header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::Format("missing PLY magic".into()));
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    for line in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", ..] => {
                return Err(Error::Format(format!("unsupported PLY format `{line}`")))
            }
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| Error::Format("bad vertex count".into()))?,
                )
            }
            ["element", ..] => {
                return Err(Error::Format("only a vertex element is supported".into()))
            }
            ["property", "float", name] => props.push(name.to_string()),
            ["property", ..] => {
                return Err(Error::Format(format!("unsupported property `{line}`")))
            }
            ["comment", ..] | [] => {}
            _ => {
                return Err(Error::Format(format!(
                    "unexpected PLY header line `{line}`"
                )))
            }
        }
    }
    let n = count.ok_or_else(|| Error::Format("PLY has no vertex element".into()))?;
    let rest = props.iter().filter(|p| p.starts_with("f_rest_")).count();
    let nk = rest / 3 + 1;
    let degree = (0..=3)
        .find(|&d| sh_count(d) == nk)
        .filter(|_| rest % 3 == 0);
    let degree = degree
        .ok_or_else(|| Error::Format(format!("{rest} f_rest values is not a valid SH degree")))?;
    let col = |name: &str| -> Result<usize> {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::Format(format!("PLY lacks property `{name}`")))
    };
    let stride = props.len();
    let body = &bytes[end + marker.len()..];
    if body.len() != n * stride * 4 {
        return Err(Error::Format(
            "PLY body size does not match the header".into(),
        ));
    }
    let at = |row: usize, c: usize| -> f64 {
        let o = (row * stride + c) * 4;
        f32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes")) as f64
    };
    let cols = |names: &[String]| -> Result<Vec<usize>> { names.iter().map(|s| col(s)).collect() };
    let pos = cols(&["x", "y", "z"].map(String::from))?;
    let dc = cols(&["f_dc_0", "f_dc_1", "f_dc_2"].map(String::from))?;
    let rest_cols = cols(&(0..rest).map(|i| format!("f_rest_{i}")).collect::<Vec<_>>())?;
    let scale = cols(&(0..3).map(|i| format!("scale_{i}")).collect::<Vec<_>>())?;
    let rot = cols(&(0..4).map(|i| format!("rot_{i}")).collect::<Vec<_>>())?;
    let opacity = col("opacity")?;
    let mut cloud = GaussianCloud::new(degree);
    let mut sh = vec![0.0; 3 * nk];
    for r in 0..n {
        for ch in 0..3 {
            sh[ch] = at(r, dc[ch]);
            for k in 1..nk {
                sh[k * 3 + ch] = at(r, rest_cols[ch * (nk - 1) + k - 1]);
            }
        }
        cloud.push(
            Vec3::new(at(r, pos[0]), at(r, pos[1]), at(r, pos[2])),
            [at(r, rot[0]), at(r, rot[1]), at(r, rot[2]), at(r, rot[3])],
            Vec3::new(at(r, scale[0]), at(r, scale[1]), at(r, scale[2])),
            at(r, opacity),
            &sh,
        );
    }
    cloud.validate()?;
    Ok(cloud)
}
