//! Image records and the on-disk interchange format: one JSON manifest per
//! split plus 8-bit PNG images. Pixel values are multiples of 1/255, so a
//! save/load cycle is exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Annotation;
use crate::tensor::Tensor3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub pixels: Tensor3,
    pub annotations: Vec<Annotation>,
    pub split: Split,
}

impl ImageRecord {
    pub fn width(&self) -> usize {
        self.pixels.w
    }

    pub fn height(&self) -> usize {
        self.pixels.h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: Split,
    pub records: Vec<ManifestRecord>,
}

/// Ground truth withheld from the training-visible unlabeled manifest.
pub type HiddenGt = BTreeMap<String, Vec<Annotation>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// The first `fraction` of the records, at least one when non-empty.
    pub fn fraction(&self, fraction: f64) -> Self {
        let n = ((self.len() as f64 * fraction).round() as usize).clamp(self.len().min(1), self.len());
        Dataset { split: self.split, records: self.records[..n].to_vec() }
    }

    pub fn index(&self) -> BTreeMap<String, usize> {
        self.records.iter().enumerate().map(|(i, r)| (r.image_id.clone(), i)).collect()
    }

    /// Write `<dir>/<split>.json` and `<dir>/images/<id>.png`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut records = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let file = format!("images/{}.png", r.image_id);
            save_png(&r.pixels, &dir.join(&file))?;
            records.push(ManifestRecord {
                image_id: r.image_id.clone(),
                file,
                width: r.width(),
                height: r.height(),
                annotations: r.annotations.clone(),
            });
        }
        let manifest = Manifest { split: self.split, records };
        let path = dir.join(format!("{}.json", self.split.as_str()));
        let s = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, s).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let path = dir.join(format!("{}.json", split.as_str()));
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::json(&path, e))?;
        let records = manifest
            .records
            .into_iter()
            .map(|m| {
                let pixels = load_png(&dir.join(&m.file))?;
                if pixels.w != m.width || pixels.h != m.height {
                    return Err(Error::Config(format!("{}: manifest size {}x{} disagrees with image", m.file, m.width, m.height)));
                }
                Ok(ImageRecord { image_id: m.image_id, pixels, annotations: m.annotations, split: manifest.split })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { split: manifest.split, records })
    }
}

pub fn save_hidden_gt(gt: &HiddenGt, path: &Path) -> Result<()> {
    let s = serde_json::to_string_pretty(gt).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_hidden_gt(path: &Path) -> Result<HiddenGt> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn save_png(t: &Tensor3, path: &Path) -> Result<()> {
    assert_eq!(t.c, 3, "png export expects three channels");
    let mut buf = image::RgbImage::new(t.w as u32, t.h as u32);
    for y in 0..t.h {
        for x in 0..t.w {
            let px = [0, 1, 2].map(|c| (t.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

pub fn load_png(path: &Path) -> Result<Tensor3> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor3::zeros(3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(c, y as usize, x as usize, px.0[c] as f64 / 255.0);
        }
    }
    Ok(t)
}
