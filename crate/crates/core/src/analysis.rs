//! Metrics and diagnostics: IoU/CIoU, successful-detection checks, region
//! partitions and normalized adversarial contribution (nAC) maps.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dual::Scalar;
use crate::error::{AscError, Result};
use crate::model::{BBox, BinaryMask, Detection, ImagePlane, ObjectTarget, PerturbationTexture, ScalarField};
use crate::oracle::{Objective, ObjectiveKind, Oracle};
use crate::par::{self, Execution};
use crate::patterns::erode_n;
use crate::texture::{optimize_texture, TextureOptConfig};

fn check_box(b: &BBox) -> Result<()> {
    if b.is_valid() {
        Ok(())
    } else {
        Err(AscError::ContractViolation(format!("degenerate box {b:?}")))
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    Ok(iou_generic(a.x, a.y, a.w, a.h, b))
}

fn iou_generic<S: Scalar>(x: S, y: S, w: S, h: S, b: &BBox) -> S {
    let zero = S::constant(0.0);
    let (right, bottom) = (x + w, y + h);
    let iw = (right.min(S::constant(b.right())) - x.max(S::constant(b.x))).max(zero);
    let ih = (bottom.min(S::constant(b.bottom())) - y.max(S::constant(b.y))).max(zero);
    let inter = iw * ih;
    // Areas from the same corner differences as the overlap, so a box
    // compared with itself gives exactly 1.
    let area_a = (right - x) * (bottom - y);
    let area_b = (b.right() - b.x) * (b.bottom() - b.y);
    inter / (area_a + S::constant(area_b) - inter)
}

/// Complete IoU of a box given in center form against a fixed box.
///
/// `CIoU = IoU − ρ²/c² − α·v` with ρ the center distance, c the diagonal of
/// the smallest enclosing box, `v = 4/π² (atan(w_b/h_b) − atan(w/h))²` and
/// `α = v / ((1 − IoU) + v)`.
pub(crate) fn ciou_center_form<S: Scalar>(cx: S, cy: S, w: S, h: S, target: &BBox) -> S {
    let half = S::constant(0.5);
    let x = cx - half * w;
    let y = cy - half * h;
    let iou = iou_generic(x, y, w, h, target);
    let (tcx, tcy) = target.center();
    let dx = cx - S::constant(tcx);
    let dy = cy - S::constant(tcy);
    let rho2 = dx * dx + dy * dy;
    let ex = (x + w).max(S::constant(target.right())) - x.min(S::constant(target.x));
    let ey = (y + h).max(S::constant(target.bottom())) - y.min(S::constant(target.y));
    let c2 = ex * ex + ey * ey;
    let dv = S::constant((target.w / target.h).atan()) - (w / h).atan();
    let v = S::constant(4.0 / (PI * PI)) * dv * dv;
    let denom = S::constant(1.0) - iou + v;
    let alpha_v = if denom.value() > 0.0 { v * v / denom } else { S::constant(0.0) };
    iou - rho2 / c2 - alpha_v
}

pub fn ciou(a: &BBox, b: &BBox) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    let (cx, cy) = a.center();
    Ok(ciou_center_form(cx, cy, a.w, a.h, b))
}

/// Best CIoU of any detection against the target, with negative CIoU and
/// "no prediction" both counted as 0.
pub fn ciou_distance_metric(detections: &[Detection], target: &ObjectTarget) -> f64 {
    detections
        .iter()
        .filter(|d| d.bbox.is_valid())
        .filter_map(|d| ciou(&d.bbox, &target.bbox).ok())
        .fold(0.0, f64::max)
}

/// True iff some detection overlaps the target with IoU above `iou_thr` and
/// scores above `score_thr` (and, when `match_category`, has the target's
/// category). `true` means the target is still detected.
pub fn sdr(detections: &[Detection], target: &ObjectTarget, iou_thr: f64, score_thr: f64, match_category: bool) -> bool {
    detections.iter().any(|d| {
        d.bbox.is_valid()
            && d.score > score_thr
            && (!match_category || d.category == target.category)
            && iou(&d.bbox, &target.bbox).map(|v| v > iou_thr).unwrap_or(false)
    })
}

/// Fraction of targets still detected.
pub fn sdr_rate(detected: &[bool]) -> f64 {
    if detected.is_empty() {
        return 0.0;
    }
    detected.iter().filter(|d| **d).count() as f64 / detected.len() as f64
}

/// Thresholds of the single-target detection check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessCriterion {
    pub iou_threshold: f64,
    pub score_threshold: f64,
}

impl Default for SuccessCriterion {
    fn default() -> Self {
        Self { iou_threshold: 0.5, score_threshold: 0.5 }
    }
}

impl SuccessCriterion {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.iou_threshold) && (0.0..=1.0).contains(&self.score_threshold) {
            Ok(())
        } else {
            Err(AscError::ContractViolation(format!("thresholds outside [0, 1]: {self:?}")))
        }
    }

    pub fn still_detected(&self, detections: &[Detection], objective: &Objective) -> bool {
        sdr(
            detections,
            &objective.target,
            self.iou_threshold,
            self.score_threshold,
            objective.kind == ObjectiveKind::Mislabel,
        )
    }

    pub fn attack_succeeded(&self, detections: &[Detection], objective: &Objective) -> bool {
        !self.still_detected(detections, objective)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Inside,
    Contour,
    Outside,
}

impl RegionKind {
    pub fn name(self) -> &'static str {
        match self {
            RegionKind::Inside => "inside",
            RegionKind::Contour => "contour",
            RegionKind::Outside => "outside",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionPartition {
    pub inside: BinaryMask,
    pub contour: BinaryMask,
    pub outside: BinaryMask,
    pub tile_size: usize,
}

impl RegionPartition {
    pub fn region(&self, kind: RegionKind) -> &BinaryMask {
        match kind {
            RegionKind::Inside => &self.inside,
            RegionKind::Contour => &self.contour,
            RegionKind::Outside => &self.outside,
        }
    }

    /// Contour if the area touches the contour band, else inside if it touches
    /// the interior, else outside.
    pub fn classify(&self, area: &BinaryMask) -> RegionKind {
        if !area.is_disjoint(&self.contour) {
            RegionKind::Contour
        } else if !area.is_disjoint(&self.inside) {
            RegionKind::Inside
        } else {
            RegionKind::Outside
        }
    }
}

pub const DEFAULT_TILE_SIZE: usize = 8;

/// Splits the image into inside / contour / outside of the target's
/// segmentation. The contour band is `contour_width` erosions deep.
pub fn region_partition(target: &ObjectTarget, contour_width: usize) -> Result<RegionPartition> {
    let seg = target
        .segmentation
        .as_ref()
        .ok_or_else(|| AscError::MissingPrior("region partition needs a segmentation".into()))?;
    if seg.is_empty() {
        return Err(AscError::DegenerateTarget("segmentation is empty".into()));
    }
    let inside = erode_n(seg, contour_width);
    let contour = seg.xor(&inside);
    let outside = seg.not();
    Ok(RegionPartition { inside, contour, outside, tile_size: DEFAULT_TILE_SIZE })
}

/// Non-overlapping square tiles in raster order; edge tiles may be smaller.
/// Returns (tile row, tile col, mask).
pub fn tile_grid(height: usize, width: usize, tile: usize) -> Vec<(usize, usize, BinaryMask)> {
    let tile = tile.max(1);
    let mut out = Vec::new();
    for (ti, r) in (0..height).step_by(tile).enumerate() {
        for (tj, c) in (0..width).step_by(tile).enumerate() {
            out.push((ti, tj, BinaryMask::rect(height, width, r as i64, c as i64, tile as i64, tile as i64)));
        }
    }
    out
}

/// Gain in objective achievable by optimizing texture on `area` alone:
/// best value found minus the clean value. Never negative, since the clean
/// image is the optimizer's first iterate.
pub fn adversarial_contribution(
    oracle: &dyn Oracle,
    image: &ImagePlane,
    objective: &Objective,
    area: &BinaryMask,
    tcfg: &TextureOptConfig,
) -> Result<f64> {
    if area.is_empty() {
        return Err(AscError::ContractViolation("adversarial contribution needs a nonempty area".into()));
    }
    let cfg = TextureOptConfig { early_stop: false, record_trace: true, ..*tcfg };
    let out = optimize_texture(oracle, image, area, objective, &cfg, &PerturbationTexture::from_image(image))?;
    Ok(out.best_value - out.trace[0])
}

/// Min-max normalization; all zeros when every value is equal.
pub fn nac_normalize(ac: &[f64]) -> Result<Vec<f64>> {
    if ac.len() < 2 {
        return Err(AscError::ContractViolation(format!("nAC needs at least 2 areas, got {}", ac.len())));
    }
    let min = ac.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = ac.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.0; ac.len()]);
    }
    Ok(ac.iter().map(|a| (a - min) / (max - min)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum NacAreas {
    /// Square tiles; with a partition each tile is also labelled by region.
    Grid { tile_size: usize, partition: Option<RegionPartition> },
    /// One area per nonempty region.
    Partition(RegionPartition),
    Custom(Vec<BinaryMask>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NacArea {
    pub label: String,
    pub region: Option<RegionKind>,
    pub tile: Option<(usize, usize)>,
    pub pixels: usize,
    pub ac: f64,
    pub nac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NacReport {
    pub areas: Vec<NacArea>,
    pub heatmap: ScalarField,
}

impl NacReport {
    /// Mean nAC over areas labelled `kind`, if there are any.
    pub fn mean_nac(&self, kind: RegionKind) -> Option<f64> {
        let v: Vec<f64> = self.areas.iter().filter(|a| a.region == Some(kind)).map(|a| a.nac).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("area,region,tile_row,tile_col,pixels,ac,nac\n");
        for a in &self.areas {
            let (tr, tc) = a.tile.map(|(r, c)| (r.to_string(), c.to_string())).unwrap_or_default();
            let region = a.region.map(RegionKind::name).unwrap_or("");
            s.push_str(&format!("{},{},{},{},{},{},{}\n", a.label, region, tr, tc, a.pixels, a.ac, a.nac));
        }
        s
    }
}

/// Computes AC for every area and normalizes into nAC, in parallel over areas.
pub fn nac_heatmap(
    oracle: &dyn Oracle,
    image: &ImagePlane,
    objective: &Objective,
    areas: &NacAreas,
    tcfg: &TextureOptConfig,
    exec: Execution,
) -> Result<NacReport> {
    let (h, w) = image.dims();
    let labelled: Vec<(String, Option<RegionKind>, Option<(usize, usize)>, BinaryMask)> = match areas {
        NacAreas::Grid { tile_size, partition } => tile_grid(h, w, *tile_size)
            .into_iter()
            .map(|(r, c, m)| (format!("tile_{r}_{c}"), partition.as_ref().map(|p| p.classify(&m)), Some((r, c)), m))
            .collect(),
        NacAreas::Partition(p) => [RegionKind::Outside, RegionKind::Inside, RegionKind::Contour]
            .into_iter()
            .filter(|k| !p.region(*k).is_empty())
            .map(|k| (k.name().to_string(), Some(k), None, p.region(k).clone()))
            .collect(),
        NacAreas::Custom(masks) => masks.iter().enumerate().map(|(i, m)| (format!("area_{i}"), None, None, m.clone())).collect(),
    };
    if labelled.len() < 2 {
        return Err(AscError::ContractViolation(format!("nAC needs at least 2 areas, got {}", labelled.len())));
    }
    if let Some((label, ..)) = labelled.iter().find(|(.., m)| m.dims() != (h, w)) {
        return Err(AscError::DimensionMismatch(format!("area {label} does not match image")));
    }
    let acs: Vec<Result<f64>> =
        par::map(exec, &labelled, |(.., m)| adversarial_contribution(oracle, image, objective, m, tcfg));
    let acs: Vec<f64> = acs.into_iter().collect::<Result<_>>()?;
    let nacs = nac_normalize(&acs)?;

    let mut heatmap = ScalarField::zeros(h, w);
    let mut out = Vec::with_capacity(labelled.len());
    for ((label, region, tile, mask), (ac, nac)) in labelled.into_iter().zip(acs.into_iter().zip(nacs)) {
        for p in mask.indices() {
            heatmap.data[p] = nac;
        }
        out.push(NacArea { label, region, tile, pixels: mask.count(), ac, nac });
    }
    Ok(NacReport { areas: out, heatmap })
}
