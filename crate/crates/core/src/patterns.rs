//! Fixed prior masks: patches, grids, strips and the semantic contour.
//!
//! Every generator is deterministic and never emits more pixels than the
//! resolved budget. Budget overflow is always trimmed in raster order.

use serde::{Deserialize, Serialize};

use crate::error::{AscError, Result};
use crate::model::{BBox, BinaryMask, ObjectTarget};

/// Erosion with the 3×3 cross; out-of-bounds neighbors count as unset.
pub fn erode(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    let mut out = BinaryMask::empty(h, w);
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let (ri, ci) = (r as i64, c as i64);
            let keep = mask.get_signed(ri - 1, ci)
                && mask.get_signed(ri + 1, ci)
                && mask.get_signed(ri, ci - 1)
                && mask.get_signed(ri, ci + 1);
            out.set(r, c, keep);
        }
    }
    out
}

pub fn erode_n(mask: &BinaryMask, times: usize) -> BinaryMask {
    let mut m = mask.clone();
    for _ in 0..times {
        if m.is_empty() {
            break;
        }
        m = erode(&m);
    }
    m
}

/// Dilation with a (2r+1)×(2r+1) square, i.e. every pixel within Chebyshev
/// distance `radius` of the input.
pub fn dilate_square(mask: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dims();
    let r = radius as i64;
    // Separable: rows then columns.
    let mut horiz = BinaryMask::empty(h, w);
    for row in 0..h {
        for col in 0..w {
            let c = col as i64;
            let hit = (c - r..=c + r).any(|cc| mask.get_signed(row as i64, cc));
            horiz.set(row, col, hit);
        }
    }
    let mut out = BinaryMask::empty(h, w);
    for row in 0..h {
        for col in 0..w {
            let rr = row as i64;
            let hit = (rr - r..=rr + r).any(|q| horiz.get_signed(q, col as i64));
            out.set(row, col, hit);
        }
    }
    out
}

/// Boundary ring of a mask: the pixels removed by one erosion.
pub fn ring(mask: &BinaryMask) -> BinaryMask {
    mask.xor(&erode(mask))
}

/// Successive erosion rings, outermost first, accumulated until at least
/// `n0` pixels are covered or the segmentation is exhausted. No trimming.
pub fn prior_contour(seg: &BinaryMask, n0: usize) -> Result<BinaryMask> {
    if seg.is_empty() {
        return Err(AscError::DegenerateTarget("segmentation is empty".into()));
    }
    let mut acc = BinaryMask::empty(seg.height(), seg.width());
    let mut current = seg.clone();
    loop {
        let eroded = erode(&current);
        acc = acc.or(&current.xor(&eroded));
        current = eroded;
        if acc.count() >= n0 || current.is_empty() {
            return Ok(acc);
        }
    }
}

/// Contour prior trimmed to exactly `min(n0, |seg|)` pixels.
///
/// The outer ring is taken first; inner rings are appended while budget
/// remains. The ring that overflows is trimmed in raster order.
pub fn contour_from_segmentation(seg: &BinaryMask, n0: usize) -> Result<BinaryMask> {
    if seg.is_empty() {
        return Err(AscError::DegenerateTarget("segmentation is empty".into()));
    }
    let mut acc = BinaryMask::empty(seg.height(), seg.width());
    let mut remaining = n0;
    let mut current = seg.clone();
    while remaining > 0 && !current.is_empty() {
        let eroded = erode(&current);
        let ring = current.xor(&eroded);
        let take = ring.truncated(remaining);
        remaining -= take.count();
        acc = acc.or(&take);
        current = eroded;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    AdvPatch,
    FourPatch,
    SmallGrid,
    TwoByTwoGrid,
    Strip,
    Contour,
}

impl PatternKind {
    pub const ALL: [PatternKind; 6] = [
        PatternKind::AdvPatch,
        PatternKind::FourPatch,
        PatternKind::SmallGrid,
        PatternKind::TwoByTwoGrid,
        PatternKind::Strip,
        PatternKind::Contour,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PatternKind::AdvPatch => "adv_patch",
            PatternKind::FourPatch => "four_patch",
            PatternKind::SmallGrid => "small_grid",
            PatternKind::TwoByTwoGrid => "two_by_two_grid",
            PatternKind::Strip => "strip",
            PatternKind::Contour => "contour",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL.into_iter().find(|k| k.name() == norm || k.alias() == norm)
    }

    fn alias(self) -> &'static str {
        match self {
            PatternKind::AdvPatch => "advpatch",
            PatternKind::FourPatch => "4patch",
            PatternKind::SmallGrid => "smallgrid",
            PatternKind::TwoByTwoGrid => "2x2grid",
            PatternKind::Strip => "strips",
            PatternKind::Contour => "fasc",
        }
    }
}

impl std::fmt::Display for PatternKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub kind: PatternKind,
    pub budget: usize,
    /// Smallest lattice pitch tried by `SmallGrid`.
    pub min_grid_pitch: usize,
}

impl PatternSpec {
    pub fn new(kind: PatternKind, budget: usize) -> Self {
        Self { kind, budget, min_grid_pitch: 2 }
    }
}

/// Builds the prior mask for `spec` around `target` on an image of size
/// `height`×`width`.
pub fn generate_pattern(
    spec: &PatternSpec,
    target: &ObjectTarget,
    height: usize,
    width: usize,
) -> Result<BinaryMask> {
    let n0 = spec.budget;
    if matches!(spec.kind, PatternKind::Contour | PatternKind::Strip) && target.segmentation.is_none() {
        let has_parts = target.part_segmentation.as_ref().is_some_and(|p| !p.is_empty());
        if spec.kind == PatternKind::Contour || !has_parts {
            return Err(AscError::MissingPrior(format!("{} needs a segmentation", spec.kind)));
        }
    }
    if n0 == 0 {
        return Ok(BinaryMask::empty(height, width));
    }
    let bbox = target.bbox;
    let mask = match spec.kind {
        PatternKind::AdvPatch => {
            let side = isqrt(n0);
            let (cx, cy) = bbox.center();
            square_at(height, width, cy, cx, side)
        }
        PatternKind::FourPatch => {
            let side = isqrt(n0 / 4);
            let mut m = BinaryMask::empty(height, width);
            for (fx, fy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let cx = bbox.x + fx * bbox.w;
                let cy = bbox.y + fy * bbox.h;
                m = m.or(&square_at(height, width, cy, cx, side));
            }
            m
        }
        PatternKind::SmallGrid => small_grid(height, width, &bbox, n0, spec.min_grid_pitch.max(2)),
        PatternKind::TwoByTwoGrid => two_by_two_grid(height, width, &bbox, n0),
        PatternKind::Strip => {
            let parts: Vec<BinaryMask> = match &target.part_segmentation {
                Some(p) if !p.is_empty() => p.clone(),
                _ => vec![target.segmentation.clone().expect("checked above")],
            };
            strips(&parts, n0)
        }
        PatternKind::Contour => {
            contour_from_segmentation(target.segmentation.as_ref().expect("checked above"), n0)?
        }
    };
    Ok(mask.truncated(n0))
}

fn isqrt(n: usize) -> usize {
    let mut s = (n as f64).sqrt() as usize;
    while s * s > n {
        s -= 1;
    }
    while (s + 1) * (s + 1) <= n {
        s += 1;
    }
    s
}

/// Square of `side` pixels whose center is as close as possible to (cy, cx).
fn square_at(height: usize, width: usize, cy: f64, cx: f64, side: usize) -> BinaryMask {
    let half = side as f64 / 2.0;
    let row = (cy - half).round() as i64;
    let col = (cx - half).round() as i64;
    BinaryMask::rect(height, width, row, col, side as i64, side as i64)
}

/// Lattice positions along one axis of length `extent`, centered.
fn lattice(extent: usize, pitch: usize) -> Vec<usize> {
    if extent == 0 {
        return Vec::new();
    }
    let start = ((extent - 1) % pitch) / 2;
    (start..extent).step_by(pitch).collect()
}

fn small_grid(height: usize, width: usize, bbox: &BBox, n0: usize, min_pitch: usize) -> BinaryMask {
    let (r0, r1, c0, c1) = bbox.pixel_span(height, width);
    let (bh, bw) = (r1 - r0, c1 - c0);
    let max_pitch = bh.max(bw).max(min_pitch);
    for pitch in min_pitch..=max_pitch {
        let rows = lattice(bh, pitch);
        let cols = lattice(bw, pitch);
        let count = rows.len() * bw + cols.len() * bh - rows.len() * cols.len();
        if count <= n0 {
            let mut m = BinaryMask::empty(height, width);
            for &r in &rows {
                for c in c0..c1 {
                    m.set(r0 + r, c, true);
                }
            }
            for &c in &cols {
                for r in r0..r1 {
                    m.set(r, c0 + c, true);
                }
            }
            return m;
        }
    }
    centered_cross(height, width, bbox, n0)
}

fn two_by_two_grid(height: usize, width: usize, bbox: &BBox, n0: usize) -> BinaryMask {
    let (r0, r1, c0, c1) = bbox.pixel_span(height, width);
    let (bh, bw) = (r1 - r0, c1 - c0);
    let fits = |t: usize| t <= bh.min(bw) && t * bh + t * bw - t * t <= n0;
    let mut t = 0;
    while fits(t + 1) {
        t += 1;
    }
    if t == 0 {
        return centered_cross(height, width, bbox, n0);
    }
    let rs = r0 + (bh - t) / 2;
    let cs = c0 + (bw - t) / 2;
    let horiz = BinaryMask::rect(height, width, rs as i64, c0 as i64, t as i64, bw as i64);
    let vert = BinaryMask::rect(height, width, r0 as i64, cs as i64, bh as i64, t as i64);
    horiz.or(&vert)
}

/// One-pixel cross through the box center whose arms are shortened in
/// proportion to the box sides until it fits `n0`.
fn centered_cross(height: usize, width: usize, bbox: &BBox, n0: usize) -> BinaryMask {
    let (r0, r1, c0, c1) = bbox.pixel_span(height, width);
    let (bh, bw) = (r1 - r0, c1 - c0);
    if n0 == 0 || bh == 0 || bw == 0 {
        return BinaryMask::empty(height, width);
    }
    // horizontal length lh, vertical length lv, sharing one pixel.
    let scale = ((n0 + 1) as f64 / (bh + bw) as f64).min(1.0);
    let mut lh = ((bw as f64 * scale).floor() as usize).clamp(1, bw);
    let mut lv = ((bh as f64 * scale).floor() as usize).clamp(1, bh);
    while lh + lv - 1 > n0 {
        if lh >= lv && lh > 1 {
            lh -= 1;
        } else if lv > 1 {
            lv -= 1;
        } else {
            break;
        }
    }
    let rc = r0 + bh / 2;
    let cc = c0 + bw / 2;
    let hs = (cc as i64 - lh as i64 / 2).clamp(c0 as i64, (c1 - lh) as i64);
    let vs = (rc as i64 - lv as i64 / 2).clamp(r0 as i64, (r1 - lv) as i64);
    let horiz = BinaryMask::rect(height, width, rc as i64, hs, 1, lh as i64);
    let vert = BinaryMask::rect(height, width, vs, cc as i64, lv as i64, 1);
    horiz.or(&vert)
}

fn strips(parts: &[BinaryMask], n0: usize) -> BinaryMask {
    let (h, w) = parts[0].dims();
    let band = |t: usize| -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for part in parts {
            let Some((cr, _)) = part.centroid() else { continue };
            let start = cr.round() as i64 - (t as i64 - 1) / 2;
            let rows = BinaryMask::rect(h, w, start, 0, t as i64, w as i64);
            m = m.or(&rows.and(part));
        }
        m
    };
    let max_t = h;
    let mut best = BinaryMask::empty(h, w);
    for t in 1..=max_t {
        let m = band(t);
        if m.count() > n0 {
            break;
        }
        best = m;
    }
    if best.is_empty() {
        band(1).truncated(n0)
    } else {
        best
    }
}
