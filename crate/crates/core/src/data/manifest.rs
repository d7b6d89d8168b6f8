use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::codec::{read_image, write_image, Image8};
use super::{Category, SegSample};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: String,
    image_path: String,
    mask_path: String,
    category: String,
}

/// Load every row of `dir/manifest.csv`. Paths are relative to `dir`.
pub fn load_manifest(dir: &Path) -> Result<Vec<SegSample>> {
    let path = dir.join(MANIFEST);
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&path)
        .map_err(|e| csv_error(&path, e))?;
    let mut out = Vec::new();
    for (row_index, record) in reader.deserialize::<Row>().enumerate() {
        let row = record.map_err(|e| csv_error(&path, e))?;
        let row_no = row_index + 1;
        let ingest = |reason: String| Error::Ingest {
            row: row_no,
            id: row.id.clone(),
            reason,
        };
        let category: Category = row.category.parse().map_err(|e: Error| ingest(e.to_string()))?;
        let image = read_image(&dir.join(&row.image_path)).map_err(|e| ingest(e.to_string()))?;
        let mask = read_image(&dir.join(&row.mask_path)).map_err(|e| ingest(e.to_string()))?;
        if (image.width, image.height) != (mask.width, mask.height) {
            return Err(ingest(format!(
                "image is {}x{} but mask is {}x{}",
                image.width, image.height, mask.width, mask.height
            )));
        }
        let image = to_rgb(&image).to_tensor();
        let mask = mask_tensor(&mask);
        out.push(SegSample::new(row.id.clone(), image, mask, category).map_err(|e| ingest(e.to_string()))?);
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        },
    }
}

fn to_rgb(img: &Image8) -> Image8 {
    if img.channels == 3 {
        return img.clone();
    }
    Image8 {
        width: img.width,
        height: img.height,
        channels: 3,
        data: img.data.iter().flat_map(|&v| [v, v, v]).collect(),
    }
}

/// First channel thresholded at `> 127`.
fn mask_tensor(img: &Image8) -> Tensor {
    let t = img.to_tensor();
    let first = if img.channels == 1 {
        t
    } else {
        Tensor::from_fn(crate::tensor::Shape::new(1, 1, img.height, img.width), |_, _, y, x| t.at(0, 0, y, x))
    };
    first.map(|v| if v * 255.0 > 127.5 { 1.0 } else { 0.0 })
}

/// Write `images/<id>.png`, `masks/<id>.png` and the manifest.
pub fn write_dataset(dir: &Path, samples: &[SegSample]) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let path = dir.join(MANIFEST);
    let mut writer = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    // An empty dataset still gets a header.
    if samples.is_empty() {
        writer
            .write_record(["id", "image_path", "mask_path", "category"])
            .map_err(|e| csv_error(&path, e))?;
    }
    for s in samples {
        let image_rel: PathBuf = ["images", &format!("{}.png", s.id)].iter().collect();
        let mask_rel: PathBuf = ["masks", &format!("{}.png", s.id)].iter().collect();
        write_image(&dir.join(&image_rel), &Image8::from_tensor(&s.image)?)?;
        write_image(&dir.join(&mask_rel), &Image8::from_mask(&s.mask)?)?;
        writer
            .serialize(Row {
                id: s.id.clone(),
                image_path: image_rel.to_string_lossy().replace('\\', "/"),
                mask_path: mask_rel.to_string_lossy().replace('\\', "/"),
                category: s.category.to_string(),
            })
            .map_err(|e| csv_error(&path, e))?;
    }
    writer.flush().map_err(|e| Error::io(&path, e))
}
