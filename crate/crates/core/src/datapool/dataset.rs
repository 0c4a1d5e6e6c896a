//! In-memory dataset types and the on-disk directory format.
//!
//! A dataset directory holds `images/<id>.png` (RGB), `labels/<id>.png`
//! (single channel, class codes) and `manifest.txt` with one `<split> <id>`
//! pair per line, where split is `train`, `val` or `test`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

/// Conventional label code for pixels excluded from loss and IoU.
pub const IGNORE_INDEX: u8 = 255;

/// Three-channel image in planar (CHW) layout with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::invalid(format!(
                "image buffer has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; Self::CHANNELS * height * width],
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Per-pixel class codes; values are `0..K` or the ignore index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "label buffer has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: LabelMap,
}

/// A set of equally-sized labeled images.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
    ignore_index: u8,
    height: usize,
    width: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize, ignore_index: u8) -> Result<Self> {
        if num_classes == 0 || num_classes > ignore_index as usize {
            return Err(Error::invalid(format!(
                "num_classes {num_classes} must be in 1..={ignore_index}"
            )));
        }
        let (height, width) = samples
            .first()
            .map(|s| (s.image.height, s.image.width))
            .unwrap_or((0, 0));
        for s in &samples {
            if s.image.height != height || s.image.width != width {
                return Err(Error::invalid(format!(
                    "image {} is {}x{}, dataset is {height}x{width}",
                    s.id, s.image.height, s.image.width
                )));
            }
            if s.label.height != height || s.label.width != width {
                return Err(Error::invalid(format!(
                    "label map of {} does not match its image",
                    s.id
                )));
            }
            if let Some(&bad) = s
                .label
                .data
                .iter()
                .find(|&&v| v != ignore_index && v as usize >= num_classes)
            {
                return Err(Error::invalid(format!(
                    "label {bad} in {} outside 0..{num_classes}",
                    s.id
                )));
            }
        }
        Ok(Self {
            samples,
            num_classes,
            ignore_index,
            height,
            width,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, idx: usize) -> &Sample {
        &self.samples[idx]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ignore_index(&self) -> u8 {
        self.ignore_index
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }
}

/// Train/val/test partition of one dataset directory.
#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DatasetSplits {
    pub fn load(dir: &Path, num_classes: usize, ignore_index: u8) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        let file = fs::File::open(&manifest_path)?;
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(split), Some(id), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Format {
                    what: "manifest",
                    path: manifest_path.clone(),
                    reason: format!("line {}: expected `<split> <id>`", lineno + 1),
                });
            };
            let target = match split {
                "train" => &mut train,
                "val" => &mut val,
                "test" => &mut test,
                other => {
                    return Err(Error::Format {
                        what: "manifest",
                        path: manifest_path.clone(),
                        reason: format!("line {}: unknown split `{other}`", lineno + 1),
                    })
                }
            };
            target.push(load_sample(dir, id)?);
        }
        Ok(Self {
            train: Dataset::new(train, num_classes, ignore_index)?,
            val: Dataset::new(val, num_classes, ignore_index)?,
            test: Dataset::new(test, num_classes, ignore_index)?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("labels"))?;
        let mut manifest = fs::File::create(dir.join("manifest.txt"))?;
        for (split, ds) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for s in ds.samples() {
                save_sample(dir, s)?;
                writeln!(manifest, "{split} {}", s.id)?;
            }
        }
        Ok(())
    }
}

fn load_sample(dir: &Path, id: &str) -> Result<Sample> {
    let rgb = image::open(dir.join("images").join(format!("{id}.png")))?.to_rgb8();
    let gray = image::open(dir.join("labels").join(format!("{id}.png")))?.to_luma8();
    let (w, h) = rgb.dimensions();
    let (h, w) = (h as usize, w as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    let (lw, lh) = gray.dimensions();
    Ok(Sample {
        id: id.to_string(),
        image: Image::new(h, w, data)?,
        label: LabelMap::new(lh as usize, lw as usize, gray.into_raw())?,
    })
}

fn save_sample(dir: &Path, s: &Sample) -> Result<()> {
    let (h, w) = (s.image.height, s.image.width);
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| (s.image.data[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    });
    rgb.save(dir.join("images").join(format!("{}.png", s.id)))?;
    let gray = GrayImage::from_raw(w as u32, h as u32, s.label.data.clone())
        .ok_or_else(|| Error::invalid("label buffer size mismatch"))?;
    gray.save(dir.join("labels").join(format!("{}.png", s.id)))?;
    Ok(())
}
