//! Seeded synthetic scenes: one square or blob object on a flat background,
//! with instance and part segmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{BinaryMask, Field3, ImagePlane, ObjectTarget, CHANNELS};
use crate::oracle::DEFAULT_CLASSES;

pub const SCENE_SIZE: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Blob,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub shape: Shape,
    pub image: ImagePlane,
    pub target: ObjectTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub size: usize,
    pub min_extent: usize,
    pub max_extent: usize,
    /// Amplitude of uniform per-entry noise added to both regions.
    pub noise: f64,
    /// Allowed range of the luminance gap between object and background.
    pub min_contrast: f64,
    pub max_contrast: f64,
    /// Per-channel color offset drawn uniformly from `[-tint, tint]`.
    pub tint: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { size: SCENE_SIZE, min_extent: 20, max_extent: 30, noise: 0.02, min_contrast: 0.2, max_contrast: 0.3, tint: 0.05 }
    }
}

/// A filled square of side `side` at (`row`, `col`) with uniform colors.
pub fn square_scene(size: usize, row: usize, col: usize, side: usize, fg: f64, bg: f64) -> Scene {
    let seg = BinaryMask::rect(size, size, row as i64, col as i64, side as i64, side as i64);
    let mut field = Field3::filled(size, size, bg);
    for p in seg.indices() {
        field.pixel_mut(p).fill(fg);
    }
    let target = ObjectTarget::from_segmentation(seg.clone(), 0)
        .expect("square is nonempty")
        .with_parts(horizontal_parts(&seg, 3));
    Scene {
        name: format!("square_{side}"),
        shape: Shape::Square,
        image: ImagePlane::new(field).expect("colors in range"),
        target,
    }
}

/// Splits a mask into `n` horizontal slabs of its bounding rows.
pub fn horizontal_parts(seg: &BinaryMask, n: usize) -> Vec<BinaryMask> {
    let Some((r0, _, r1, _)) = seg.bounds() else { return Vec::new() };
    let rows = r1 - r0;
    let (h, w) = seg.dims();
    (0..n)
        .map(|i| {
            let a = r0 + rows * i / n;
            let b = r0 + rows * (i + 1) / n;
            seg.and(&BinaryMask::rect(h, w, a as i64, 0, (b - a) as i64, w as i64))
        })
        .filter(|m| !m.is_empty())
        .collect()
}

/// Generates scene `index` of the suite with seed `seed`. Even indices are
/// squares (axis-aligned rectangles), odd ones superellipse blobs.
pub fn generate_scene(seed: u64, index: usize, cfg: &SceneConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n = cfg.size;
    let shape = if index % 2 == 0 { Shape::Square } else { Shape::Blob };
    let ext_h = rng.gen_range(cfg.min_extent..=cfg.max_extent);
    let ext_w = rng.gen_range(cfg.min_extent..=cfg.max_extent);
    let margin = 3;
    let row = rng.gen_range(margin..=n - margin - ext_h);
    let col = rng.gen_range(margin..=n - margin - ext_w);

    let seg = match shape {
        Shape::Square => BinaryMask::rect(n, n, row as i64, col as i64, ext_h as i64, ext_w as i64),
        Shape::Blob => {
            let exponent: f64 = rng.gen_range(2.0..4.0);
            let (cy, cx) = (row as f64 + ext_h as f64 / 2.0, col as f64 + ext_w as f64 / 2.0);
            let (ry, rx) = (ext_h as f64 / 2.0, ext_w as f64 / 2.0);
            let mut m = BinaryMask::empty(n, n);
            for r in 0..n {
                for c in 0..n {
                    let dy = ((r as f64 + 0.5 - cy) / ry).abs();
                    let dx = ((c as f64 + 0.5 - cx) / rx).abs();
                    m.set(r, c, dx.powf(exponent) + dy.powf(exponent) <= 1.0);
                }
            }
            m
        }
    };

    // Luminance levels with a bounded gap, then a small independent tint per channel.
    let (lf, lb) = loop {
        let a: f64 = rng.gen_range(0.1..0.9);
        let b: f64 = rng.gen_range(0.1..0.9);
        if (cfg.min_contrast..=cfg.max_contrast).contains(&(a - b).abs()) {
            break (a, b);
        }
    };
    let mut tinted = |l: f64| -> [f64; CHANNELS] { std::array::from_fn(|_| l + rng.gen_range(-cfg.tint..=cfg.tint)) };
    let fg = tinted(lf);
    let bg = tinted(lb);
    let mut field = Field3::zeros(n, n);
    for p in 0..n * n {
        let base = if seg.get_index(p) { &fg } else { &bg };
        for (c, v) in field.pixel_mut(p).iter_mut().enumerate() {
            let noise = if cfg.noise > 0.0 { rng.gen_range(-cfg.noise..=cfg.noise) } else { 0.0 };
            *v = (base[c] + noise).clamp(0.0, 1.0);
        }
    }
    let category = rng.gen_range(0..DEFAULT_CLASSES as u32);
    let parts = horizontal_parts(&seg, 3);
    let target = ObjectTarget::from_segmentation(seg, category).expect("scene object is nonempty").with_parts(parts);
    Scene {
        name: format!("scene_{index:03}"),
        shape,
        image: ImagePlane::new(field).expect("values clamped"),
        target,
    }
}

pub fn scene_suite(seed: u64, count: usize, cfg: &SceneConfig) -> Vec<Scene> {
    (0..count).map(|i| generate_scene(seed, i, cfg)).collect()
}
