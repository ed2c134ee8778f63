//! Shared domain types and the algebra of composing sparse adversarial examples.

use serde::{Deserialize, Serialize};

use crate::error::{AscError, Result};

pub const CHANNELS: usize = 3;

/// Dense H×W×3 grid of reals, row-major with channels innermost.
///
/// Unconstrained; used for gradients. [`ImagePlane`] and
/// [`PerturbationTexture`] wrap it with the `[0, 1]` invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3 {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Field3 {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width * CHANNELS] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(AscError::DimensionMismatch(format!(
                "expected {}×{}×{} = {} values, got {}",
                height,
                width,
                CHANNELS,
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * CHANNELS + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * CHANNELS..(p + 1) * CHANNELS]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * CHANNELS..(p + 1) * CHANNELS]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum over channels of the absolute value at each pixel.
    pub fn channel_abs_sum(&self) -> Vec<f64> {
        self.data.chunks_exact(CHANNELS).map(|px| px.iter().map(|v| v.abs()).sum()).collect()
    }
}

fn check_unit_range(field: &Field3, what: &str) -> Result<()> {
    if field.height == 0 || field.width == 0 {
        return Err(AscError::ContractViolation(format!("{what} must be at least 1×1")));
    }
    if let Some((i, v)) = field.data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(AscError::ContractViolation(format!(
            "{what} value {v} at flat index {i} outside [0, 1]"
        )));
    }
    Ok(())
}

/// An RGB image with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane(Field3);

impl ImagePlane {
    pub fn new(field: Field3) -> Result<Self> {
        check_unit_range(&field, "image")?;
        Ok(Self(field))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Field3::from_vec(height, width, data)?)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Field3::filled(height, width, value))
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn field(&self) -> &Field3 {
        &self.0
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.0.get(row, col, ch)
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        self.0.pixel(p)
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_field(self) -> Field3 {
        self.0
    }

    /// Channel mean per pixel.
    pub fn grayscale(&self) -> Vec<f64> {
        self.0.data.chunks_exact(CHANNELS).map(|px| px.iter().sum::<f64>() / CHANNELS as f64).collect()
    }
}

/// Replacement pixel values; only entries under a mask are ever used.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationTexture(Field3);

impl PerturbationTexture {
    pub fn new(field: Field3) -> Result<Self> {
        check_unit_range(&field, "texture")?;
        Ok(Self(field))
    }

    /// A texture equal to the base image, i.e. zero effective perturbation.
    pub fn from_image(image: &ImagePlane) -> Self {
        Self(image.0.clone())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn field(&self) -> &Field3 {
        &self.0
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.0.get(row, col, ch)
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        self.0.pixel(p)
    }

    /// Applies `f` to every channel of pixel `p` and clips the result to `[0, 1]`.
    pub(crate) fn update_pixel(&mut self, p: usize, mut f: impl FnMut(usize, f64) -> f64) {
        for (c, v) in self.0.pixel_mut(p).iter_mut().enumerate() {
            *v = f(c, *v).clamp(0.0, 1.0);
        }
    }

    pub(crate) fn copy_pixel_from(&mut self, p: usize, src: &[f64]) {
        self.0.pixel_mut(p).copy_from_slice(src);
    }
}

/// Single-channel real grid, used for selection parameters and surrogates.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(AscError::DimensionMismatch(format!(
                "scalar field expects {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }
}

/// Spatial pixel-selection mask; one bit covers all channels of a pixel.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "BinaryMask {}×{} (l0 = {})", self.height, self.width, self.count())?;
        for r in 0..self.height {
            let row: String =
                (0..self.width).map(|c| if self.get(r, c) { '#' } else { '.' }).collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(AscError::DimensionMismatch(format!(
                "mask expects {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn from_indices(height: usize, width: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::empty(height, width);
        for i in indices {
            m.bits[i] = true;
        }
        m
    }

    /// Filled axis-aligned rectangle clipped to the mask bounds.
    pub fn rect(height: usize, width: usize, row: i64, col: i64, rows: i64, cols: i64) -> Self {
        let mut m = Self::empty(height, width);
        for r in row.max(0)..(row + rows).min(height as i64) {
            for c in col.max(0)..(col + cols).min(width as i64) {
                m.set(r as usize, c as usize, true);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    /// Like [`get`](Self::get) but treats out-of-bounds coordinates as unset.
    #[inline]
    pub fn get_signed(&self, row: i64, col: i64) -> bool {
        row >= 0
            && col >= 0
            && (row as usize) < self.height
            && (col as usize) < self.width
            && self.bits[row as usize * self.width + col as usize]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        self.bits[i]
    }

    #[inline]
    pub fn set_index(&mut self, i: usize, value: bool) {
        self.bits[i] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Exact popcount, the l0 norm of the mask.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Indices of set pixels in raster order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Self {
        assert_eq!(self.dims(), other.dims(), "mask dimension mismatch");
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    pub fn and(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn xor(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a ^ b)
    }

    pub fn and_not(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn not(&self) -> Self {
        Self { height: self.height, width: self.width, bits: self.bits.iter().map(|b| !b).collect() }
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !(*a && *b))
    }

    /// Keeps the first `n` set pixels in raster order.
    pub fn truncated(&self, n: usize) -> Self {
        let mut out = Self::empty(self.height, self.width);
        for i in self.indices().take(n) {
            out.bits[i] = true;
        }
        out
    }

    /// Bounding box of set pixels as (row0, col0, row1, col1), half-open.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for i in self.indices() {
            let (r, c) = (i / self.width, i % self.width);
            b = Some(match b {
                None => (r, c, r + 1, c + 1),
                Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r + 1), c1.max(c + 1)),
            });
        }
        b
    }

    /// Mean (row, col) of set pixels, in pixel-index coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let n = self.count();
        if n == 0 {
            return None;
        }
        let (mut sr, mut sc) = (0.0, 0.0);
        for i in self.indices() {
            sr += (i / self.width) as f64;
            sc += (i % self.width) as f64;
        }
        Some((sr / n as f64, sc / n as f64))
    }
}

/// Axis-aligned box `(x, y, w, h)` in pixel units; `x` is the column axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
    }

    /// Pixel rows/cols covered, clipped to an image: (row0, row1, col0, col1), half-open.
    pub fn pixel_span(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let clip = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
        let r0 = clip(self.y.floor(), height);
        let r1 = clip(self.bottom().ceil(), height);
        let c0 = clip(self.x.floor(), width);
        let c1 = clip(self.right().ceil(), width);
        (r0, r1.max(r0), c0, c1.max(c0))
    }

    /// Tight box around the set pixels of a mask.
    pub fn of_mask(mask: &BinaryMask) -> Option<Self> {
        mask.bounds().map(|(r0, c0, r1, c1)| {
            BBox::new(c0 as f64, r0 as f64, (c1 - c0) as f64, (r1 - r0) as f64)
        })
    }

    pub fn to_mask(&self, height: usize, width: usize) -> BinaryMask {
        let (r0, r1, c0, c1) = self.pixel_span(height, width);
        BinaryMask::rect(height, width, r0 as i64, c0 as i64, (r1 - r0) as i64, (c1 - c0) as i64)
    }
}

/// The object under attack.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTarget {
    pub bbox: BBox,
    pub category: u32,
    pub segmentation: Option<BinaryMask>,
    pub part_segmentation: Option<Vec<BinaryMask>>,
}

impl ObjectTarget {
    pub fn new(bbox: BBox, category: u32) -> Self {
        Self { bbox, category, segmentation: None, part_segmentation: None }
    }

    /// Target whose box is the tight bound of `segmentation`.
    pub fn from_segmentation(segmentation: BinaryMask, category: u32) -> Result<Self> {
        let bbox = BBox::of_mask(&segmentation)
            .ok_or_else(|| AscError::DegenerateTarget("segmentation is empty".into()))?;
        Ok(Self { bbox, category, segmentation: Some(segmentation), part_segmentation: None })
    }

    pub fn with_parts(mut self, parts: Vec<BinaryMask>) -> Self {
        self.part_segmentation = Some(parts);
        self
    }

    /// Checks the target against an image of the given size.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let b = &self.bbox;
        if !b.is_valid() || b.x < 0.0 || b.y < 0.0 || b.right() > width as f64 || b.bottom() > height as f64 {
            return Err(AscError::DegenerateTarget(format!(
                "bbox {b:?} does not lie within {height}×{width} image"
            )));
        }
        let masks = self.segmentation.iter().chain(self.part_segmentation.iter().flatten());
        for m in masks {
            if m.dims() != (height, width) {
                return Err(AscError::DimensionMismatch(format!(
                    "segmentation {:?} vs image {:?}",
                    m.dims(),
                    (height, width)
                )));
            }
        }
        if let Some(seg) = &self.segmentation {
            if seg.is_empty() {
                return Err(AscError::DegenerateTarget("segmentation is empty".into()));
            }
        }
        Ok(())
    }

    /// Object area: segmentation popcount when available, else box area.
    pub fn area(&self) -> f64 {
        match &self.segmentation {
            Some(seg) => seg.count() as f64,
            None => self.bbox.area(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum AttackBudget {
    Absolute(usize),
    FractionOfArea(f64),
}

impl AttackBudget {
    /// Parses `abs:N` or a bare fraction such as `0.05`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || AscError::ContractViolation(format!("invalid budget {s:?}"));
        if let Some(n) = s.strip_prefix("abs:") {
            return n.trim().parse().map(AttackBudget::Absolute).map_err(|_| bad());
        }
        let f: f64 = s.trim().parse().map_err(|_| bad())?;
        if !(f > 0.0 && f <= 1.0) {
            return Err(bad());
        }
        Ok(AttackBudget::FractionOfArea(f))
    }
}

/// Resolves a budget into a pixel count `N0` for a target.
pub fn resolve_budget(budget: AttackBudget, target: &ObjectTarget) -> Result<usize> {
    match budget {
        AttackBudget::Absolute(n) => Ok(n),
        AttackBudget::FractionOfArea(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(AscError::ContractViolation(format!("budget fraction {f} outside (0, 1]")));
            }
            let area = target.area();
            if area <= 0.0 {
                return Err(AscError::DegenerateTarget("object area is zero".into()));
            }
            // Nudge by a few ulps so that e.g. 0.05 * 10000 does not floor to 499.
            let raw = f * area;
            Ok((raw + raw * 1e-12).floor() as usize)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub category: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AttackMetadata {
    pub seed: u64,
    pub iterations: usize,
    pub final_value: f64,
    pub success: bool,
    /// Detections on the returned adversarial image.
    pub detections: Vec<Detection>,
}

/// A base image with a budgeted mask and texture.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialExample {
    pub base: ImagePlane,
    pub mask: BinaryMask,
    pub texture: PerturbationTexture,
    pub metadata: AttackMetadata,
}

impl AdversarialExample {
    pub fn image(&self) -> ImagePlane {
        compose_adversarial(&self.base, &self.mask, &self.texture)
            .expect("adversarial example holds dimension-compatible parts")
    }

    pub fn l0(&self) -> usize {
        self.mask.count()
    }
}

/// Replacement composition: texture value where the mask is set, base elsewhere.
pub fn compose_adversarial(
    base: &ImagePlane,
    mask: &BinaryMask,
    texture: &PerturbationTexture,
) -> Result<ImagePlane> {
    if base.dims() != mask.dims() || base.dims() != texture.dims() {
        return Err(AscError::DimensionMismatch(format!(
            "base {:?}, mask {:?}, texture {:?}",
            base.dims(),
            mask.dims(),
            texture.dims()
        )));
    }
    let mut out = base.0.clone();
    for p in mask.indices() {
        out.pixel_mut(p).copy_from_slice(texture.pixel(p));
    }
    Ok(ImagePlane(out))
}

pub fn l0_norm(mask: &BinaryMask) -> usize {
    mask.count()
}
