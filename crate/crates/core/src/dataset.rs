//! On-disk multi-view sequences: one `records.toml` index plus PNG images, PNG
//! masks and PFM depth maps per record.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ExpressionParams;
use crate::io;
use crate::optim::FrameRecord;
use crate::raster::Camera;

const INDEX: &str = "records.toml";

#[derive(Serialize, Deserialize)]
struct Entry {
    frame: usize,
    view: usize,
    camera: Camera,
    params: ExpressionParams,
    image: String,
    head_image: String,
    hair_mask: String,
    coverage: String,
    depth: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    record: Vec<Entry>,
}

/// Writes `records` under `dir` (created if missing). Images are quantised to 8 bits.
pub fn save_records(dir: &Path, records: &[FrameRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        let stem = format!("f{:04}_v{:02}", r.frame, r.view);
        let name = |kind: &str, ext: &str| format!("{stem}_{kind}.{ext}");
        let e = Entry {
            frame: r.frame,
            view: r.view,
            camera: r.camera.clone(),
            params: r.params.clone(),
            image: name("image", "png"),
            head_image: name("head", "png"),
            hair_mask: name("hair", "png"),
            coverage: name("coverage", "png"),
            depth: r.depth.as_ref().map(|_| name("depth", "pfm")),
        };
        io::write_png_rgb(&dir.join(&e.image), &r.image)?;
        io::write_png_rgb(&dir.join(&e.head_image), &r.head_image)?;
        io::write_png_mask(&dir.join(&e.hair_mask), &r.hair_mask)?;
        io::write_png_mask(&dir.join(&e.coverage), &r.coverage)?;
        if let (Some(d), Some(p)) = (&r.depth, &e.depth) {
            io::write_pfm(&dir.join(p), d)?;
        }
        entries.push(e);
    }
    let text = toml::to_string(&Index { record: entries })
        .map_err(|e| Error::Format(format!("records: {e}")))?;
    fs::write(dir.join(INDEX), text)?;
    Ok(())
}

/// Reads the records written by [`save_records`], validating each one.
pub fn load_records(dir: &Path) -> Result<Vec<FrameRecord>> {
    let text = fs::read_to_string(dir.join(INDEX))?;
    let index: Index = toml::from_str(&text).map_err(|e| Error::Format(format!("records: {e}")))?;
    index
        .record
        .into_iter()
        .map(|e| {
            let r = FrameRecord {
                frame: e.frame,
                view: e.view,
                camera: e.camera,
                params: e.params,
                image: io::read_png_rgb(&dir.join(&e.image))?,
                head_image: io::read_png_rgb(&dir.join(&e.head_image))?,
                hair_mask: io::read_png_mask(&dir.join(&e.hair_mask))?,
                coverage: io::read_png_mask(&dir.join(&e.coverage))?,
                depth: e.depth.map(|p| io::read_pfm(&dir.join(p))).transpose()?,
            };
            r.validate()?;
            Ok(r)
        })
        .collect()
}
