//! Image, mask and annotation files.

use std::fs;
use std::path::{Path, PathBuf};

use asc_core::model::{BBox, BinaryMask, ImagePlane, ObjectTarget, ScalarField, CHANNELS};
use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub fn read_image(path: &Path) -> Result<ImagePlane, CliError> {
    let img = image::open(path).map_err(|e| CliError::io(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    ImagePlane::from_vec(h as usize, w as usize, data).map_err(CliError::from)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_image(path: &Path, image: &ImagePlane) -> Result<(), CliError> {
    let (h, w) = image.dims();
    let mut out = RgbImage::new(w as u32, h as u32);
    for (i, px) in image.as_slice().chunks_exact(CHANNELS).enumerate() {
        out.put_pixel((i % w) as u32, (i / w) as u32, Rgb([quantize(px[0]), quantize(px[1]), quantize(px[2])]));
    }
    save(path, |p| out.save(p))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask, CliError> {
    let img = image::open(path).map_err(|e| CliError::io(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let bits = img.as_raw().iter().map(|&v| v > 0).collect();
    BinaryMask::from_bits(h as usize, w as usize, bits).map_err(CliError::from)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<(), CliError> {
    let (h, w) = mask.dims();
    let out = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }]));
    save(path, |p| out.save(p))
}

/// Writes a scalar field in [0, 1] as 8-bit grayscale.
pub fn write_heatmap(path: &Path, field: &ScalarField) -> Result<(), CliError> {
    let w = field.width;
    let out = GrayImage::from_fn(field.width as u32, field.height as u32, |x, y| {
        Luma([quantize(field.data[y as usize * w + x as usize])])
    });
    save(path, |p| out.save(p))
}

fn save(path: &Path, f: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<(), CliError> {
    ensure_parent(path)?;
    f(path).map_err(|e| CliError::io(path, e))
}

pub fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

/// Uncompressed COCO run-length encoding: column-major runs that start
/// with a run of zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Self {
        let (h, w) = mask.dims();
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for c in 0..w {
            for r in 0..h {
                if mask.get(r, c) != current {
                    counts.push(run);
                    run = 0;
                    current = !current;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle { size: [h, w], counts }
    }

    pub fn decode(&self) -> Result<BinaryMask, CliError> {
        let [h, w] = self.size;
        let total: usize = self.counts.iter().sum();
        if total != h * w {
            return Err(CliError::Validation(format!("RLE covers {total} pixels, expected {}", h * w)));
        }
        let mut mask = BinaryMask::empty(h, w);
        let mut pos = 0;
        for (i, &n) in self.counts.iter().enumerate() {
            if i % 2 == 1 {
                for k in pos..pos + n {
                    mask.set(k % h, k / h, true);
                }
            }
            pos += n;
        }
        Ok(mask)
    }
}

/// A segmentation given either as a mask PNG path (relative to the
/// annotation file) or inline RLE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Png(String),
    Rle(Rle),
}

impl Segmentation {
    fn load(&self, base: &Path) -> Result<BinaryMask, CliError> {
        match self {
            Segmentation::Png(p) => read_mask(&base.join(p)),
            Segmentation::Rle(r) => r.decode(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    pub file_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(default)]
    pub image_id: Option<u64>,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
    pub category_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Segmentation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub part_segmentations: Vec<Segmentation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    #[serde(default)]
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<Annotation>,
}

impl AnnotationFile {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let file: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((file, base))
    }

    /// The first annotation for `image_path`, matched by file name. With a
    /// single annotation and no image table, that annotation is used.
    pub fn annotation_for(&self, image_path: &Path) -> Result<&Annotation, CliError> {
        let name = image_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let id = self.images.iter().find(|e| Path::new(&e.file_name).file_name().and_then(|n| n.to_str()) == Some(name)).map(|e| e.id);
        let found = match id {
            Some(id) => self.annotations.iter().find(|a| a.image_id == Some(id)),
            None if self.images.is_empty() && self.annotations.len() == 1 => self.annotations.first(),
            None => None,
        };
        found.ok_or_else(|| CliError::Validation(format!("no annotation for image {name}")))
    }
}

impl Annotation {
    pub fn to_target(&self, base: &Path) -> Result<ObjectTarget, CliError> {
        let [x, y, w, h] = self.bbox;
        let mut target = ObjectTarget::new(BBox::new(x, y, w, h), self.category_id);
        if let Some(seg) = &self.segmentation {
            target.segmentation = Some(seg.load(base)?);
        }
        if !self.part_segmentations.is_empty() {
            let parts = self.part_segmentations.iter().map(|s| s.load(base)).collect::<Result<Vec<_>, _>>()?;
            target.part_segmentation = Some(parts);
        }
        Ok(target)
    }

    pub fn from_target(target: &ObjectTarget, image_id: Option<u64>) -> Self {
        let b = target.bbox;
        Annotation {
            image_id,
            bbox: [b.x, b.y, b.w, b.h],
            category_id: target.category,
            segmentation: target.segmentation.as_ref().map(|m| Segmentation::Rle(Rle::encode(m))),
            part_segmentations: target
                .part_segmentation
                .iter()
                .flatten()
                .map(|m| Segmentation::Rle(Rle::encode(m)))
                .collect(),
        }
    }
}
