use super::{
    check_target_category, hashed_uniform, log_one_minus_sigmoid, log_softmax, sigmoid, Capabilities, Objective,
    ObjectiveKind, Oracle, OracleReport, DEFAULT_CLASSES, LOG_FLOOR,
};
use crate::analysis::ciou_center_form;
use crate::dual::Dual;
use crate::error::Result;
use crate::model::{BBox, Detection, Field3, ImagePlane, CHANNELS};

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Below this total energy the predicted box falls back to the window center.
const ZERO_ENERGY: f64 = 1e-9;
const VAR_FLOOR: f64 = 1e-12;
/// Width = sqrt(6 · var) recovers the side of a square from its edge energy.
const EXTENT_GAIN: f64 = 6.0;

/// Default objectness gain and offset. With these, a low-contrast object of
/// 20 to 30 pixels is detected with a score only modestly above 0.5.
pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_BETA: f64 = -1.3;
/// Texture step size matched to this detector's gradient scale, which is
/// roughly the inverse of the pooled box area.
pub const SUGGESTED_STEP_SIZE: f64 = 2.0;

/// Toy detector driven by Sobel edge energy.
///
/// Grayscale is a seeded convex mix of the channels; energy is
/// `e = (Gx * g)^2 + (Gy * g)^2` with replicate borders. Objectness of a box is
/// `σ(alpha · mean_box(e) + beta)`. The predicted box is the energy-weighted
/// centroid and second-moment extent inside a search window around the
/// target, which keeps box-shift differentiable.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDetector {
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub classes: usize,
    /// Search window grows the target box by this fraction of its size per side.
    pub window_margin: f64,
    /// Objectness and class pooling grow the box by this many pixels per side,
    /// so both sides of a boundary step fall inside the pooled region.
    pub pool_pad: f64,
    channel_weights: [f64; CHANNELS],
    class_weights: Vec<[f64; 5]>,
    class_bias: Vec<f64>,
}

struct Forward {
    gx: Vec<f64>,
    gy: Vec<f64>,
    energy: Vec<f64>,
}

struct BoxFit {
    bbox: BBox,
    /// (cx, cy, w, h, total energy, var_x, var_y), absent on the zero-energy fallback.
    moments: Option<[f64; 7]>,
}

impl EdgeDetector {
    pub fn new(seed: u64) -> Self {
        Self::with_params(seed, DEFAULT_ALPHA, DEFAULT_BETA)
    }

    pub fn with_params(seed: u64, alpha: f64, beta: f64) -> Self {
        let raw: Vec<f64> = (0..CHANNELS).map(|c| 1.0 + 0.6 * hashed_uniform(seed, &[0xC0, c as u64])).collect();
        let total: f64 = raw.iter().sum();
        let mut channel_weights = [0.0; CHANNELS];
        for (w, r) in channel_weights.iter_mut().zip(&raw) {
            *w = r / total;
        }
        let classes = DEFAULT_CLASSES;
        let class_weights = (0..classes)
            .map(|k| {
                let mut row = [0.0; 5];
                for (j, v) in row.iter_mut().enumerate() {
                    *v = 2.0 * hashed_uniform(seed, &[0xC1, k as u64, j as u64]);
                }
                row
            })
            .collect();
        let class_bias = (0..classes).map(|k| 0.5 * hashed_uniform(seed, &[0xC2, k as u64])).collect();
        Self { seed, alpha, beta, classes, window_margin: 0.25, pool_pad: 1.0, channel_weights, class_weights, class_bias }
    }

    pub fn channel_weights(&self) -> [f64; CHANNELS] {
        self.channel_weights
    }

    fn forward(&self, image: &ImagePlane) -> Forward {
        let (h, w) = image.dims();
        let gray: Vec<f64> = image
            .as_slice()
            .chunks_exact(CHANNELS)
            .map(|px| px.iter().zip(&self.channel_weights).map(|(v, cw)| v * cw).sum())
            .collect();
        let mut gx = vec![0.0; h * w];
        let mut gy = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                // Written as differences of opposite taps so flat regions give exactly 0.
                let at = |dr: i64, dc: i64| {
                    gray[clamp_idx(r as i64 + dr, h) * w + clamp_idx(c as i64 + dc, w)]
                };
                let mut sx = 0.0;
                let mut sy = 0.0;
                for (d, wt) in [(-1i64, 1.0), (0, 2.0), (1, 1.0)] {
                    sx += wt * (at(d, 1) - at(d, -1));
                    sy += wt * (at(1, d) - at(-1, d));
                }
                gx[r * w + c] = sx;
                gy[r * w + c] = sy;
            }
        }
        let energy = gx.iter().zip(&gy).map(|(a, b)| a * a + b * b).collect();
        Forward { gx, gy, energy }
    }

    /// Mean edge energy over a box.
    pub fn mean_energy(&self, image: &ImagePlane, bbox: &BBox) -> f64 {
        let fwd = self.forward(image);
        let (h, w) = image.dims();
        span_mean(&fwd.energy, w, self.pool_span(bbox, h, w))
    }

    /// Objectness of an arbitrary box.
    pub fn objectness(&self, image: &ImagePlane, bbox: &BBox) -> f64 {
        sigmoid(self.alpha * self.mean_energy(image, bbox) + self.beta)
    }

    fn pool_span(&self, b: &BBox, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let p = self.pool_pad;
        BBox::new(b.x - p, b.y - p, b.w + 2.0 * p, b.h + 2.0 * p).pixel_span(height, width)
    }

    fn window(&self, target: &BBox, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let mx = target.w * self.window_margin;
        let my = target.h * self.window_margin;
        BBox::new(target.x - mx, target.y - my, target.w + 2.0 * mx, target.h + 2.0 * my).pixel_span(height, width)
    }

    fn fit_box(&self, energy: &[f64], width: usize, window: (usize, usize, usize, usize), target: &BBox) -> BoxFit {
        let (r0, r1, c0, c1) = window;
        let mut total = 0.0;
        let (mut sx, mut sy) = (0.0, 0.0);
        for r in r0..r1 {
            for c in c0..c1 {
                let e = energy[r * width + c];
                total += e;
                sx += e * (c as f64 + 0.5);
                sy += e * (r as f64 + 0.5);
            }
        }
        if total < ZERO_ENERGY {
            let cx = (c0 + c1) as f64 / 2.0;
            let cy = (r0 + r1) as f64 / 2.0;
            return BoxFit { bbox: BBox::new(cx - target.w / 2.0, cy - target.h / 2.0, target.w, target.h), moments: None };
        }
        let (cx, cy) = (sx / total, sy / total);
        let (mut vx, mut vy) = (0.0, 0.0);
        for r in r0..r1 {
            for c in c0..c1 {
                let e = energy[r * width + c];
                vx += e * (c as f64 + 0.5 - cx).powi(2);
                vy += e * (r as f64 + 0.5 - cy).powi(2);
            }
        }
        vx /= total;
        vy /= total;
        let bw = (EXTENT_GAIN * vx.max(VAR_FLOOR)).sqrt();
        let bh = (EXTENT_GAIN * vy.max(VAR_FLOOR)).sqrt();
        BoxFit {
            bbox: BBox::new(cx - bw / 2.0, cy - bh / 2.0, bw, bh),
            moments: Some([cx, cy, bw, bh, total, vx, vy]),
        }
    }

    fn class_features(&self, energy: &[f64], width: usize, span: (usize, usize, usize, usize)) -> ([f64; 5], [(usize, usize, usize, usize); 5]) {
        let (r0, r1, c0, c1) = span;
        let rm = r0 + (r1 - r0) / 2;
        let cm = c0 + (c1 - c0) / 2;
        let spans = [span, (r0, rm, c0, cm), (r0, rm, cm, c1), (rm, r1, c0, cm), (rm, r1, cm, c1)];
        let mut f = [0.0; 5];
        for (fj, s) in f.iter_mut().zip(&spans) {
            *fj = span_mean(energy, width, *s);
        }
        (f, spans)
    }

    fn run(&self, image: &ImagePlane, objective: &Objective, want_grad: bool) -> Result<OracleReport> {
        let y = check_target_category(objective, self.classes)?;
        let (h, w) = image.dims();
        let target = objective.target.bbox;
        let fwd = self.forward(image);
        let span = self.pool_span(&target, h, w);
        let m = span_mean(&fwd.energy, w, span);
        let z = self.alpha * m + self.beta;
        let s = sigmoid(z);

        let (features, feature_spans) = self.class_features(&fwd.energy, w, span);
        let logits: Vec<f64> = (0..self.classes)
            .map(|k| self.class_bias[k] + self.class_weights[k].iter().zip(&features).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let (logp_y, probs) = log_softmax(&logits, y);
        let category = logits.iter().enumerate().fold(0, |b, (i, v)| if *v > logits[b] { i } else { b }) as u32;

        let window = self.window(&target, h, w);
        let fit = self.fit_box(&fwd.energy, w, window, &target);

        // d value / d energy, per pixel.
        let mut de = if want_grad { vec![0.0; h * w] } else { Vec::new() };
        let value = match objective.kind {
            ObjectiveKind::Vanishing => {
                let raw = log_one_minus_sigmoid(z);
                if raw <= LOG_FLOOR {
                    LOG_FLOOR
                } else {
                    if want_grad {
                        add_span(&mut de, w, span, -s * self.alpha);
                    }
                    raw
                }
            }
            ObjectiveKind::Mislabel => {
                let raw = -logp_y;
                if raw >= -LOG_FLOOR {
                    -LOG_FLOOR
                } else {
                    if want_grad {
                        for (j, fs) in feature_spans.iter().enumerate() {
                            let dfj: f64 = (0..self.classes)
                                .map(|k| (probs[k] - if k == y { 1.0 } else { 0.0 }) * self.class_weights[k][j])
                                .sum();
                            add_span(&mut de, w, *fs, dfj);
                        }
                    }
                    raw
                }
            }
            ObjectiveKind::BoxShift => match fit.moments {
                None => -ciou_center_form::<f64>(
                    fit.bbox.x + fit.bbox.w / 2.0,
                    fit.bbox.y + fit.bbox.h / 2.0,
                    fit.bbox.w,
                    fit.bbox.h,
                    &target,
                ),
                Some([cx, cy, bw, bh, total, vx, vy]) => {
                    let ciou = ciou_center_form(
                        Dual::<4>::var(cx, 0),
                        Dual::<4>::var(cy, 1),
                        Dual::<4>::var(bw, 2),
                        Dual::<4>::var(bh, 3),
                        &target,
                    );
                    if want_grad {
                        let [gcx, gcy, gw, gh] = ciou.d.map(|d| -d);
                        let dw_dvar = if vx > VAR_FLOOR { EXTENT_GAIN / (2.0 * bw) } else { 0.0 };
                        let dh_dvar = if vy > VAR_FLOOR { EXTENT_GAIN / (2.0 * bh) } else { 0.0 };
                        let (r0, r1, c0, c1) = window;
                        for r in r0..r1 {
                            for c in c0..c1 {
                                let dx = c as f64 + 0.5 - cx;
                                let dy = r as f64 + 0.5 - cy;
                                de[r * w + c] += (gcx * dx
                                    + gcy * dy
                                    + gw * dw_dvar * (dx * dx - vx)
                                    + gh * dh_dvar * (dy * dy - vy))
                                    / total;
                            }
                        }
                    }
                    -ciou.v
                }
            },
        };

        let grad = want_grad.then(|| self.backprop(&fwd, &de, h, w));
        Ok(OracleReport { value, grad, detections: vec![Detection { bbox: fit.bbox, score: s, category }] })
    }

    /// Chain rule from per-pixel energy sensitivities back to pixel entries.
    fn backprop(&self, fwd: &Forward, de: &[f64], h: usize, w: usize) -> Field3 {
        let mut dgray = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                if de[p] == 0.0 {
                    continue;
                }
                let ax = 2.0 * de[p] * fwd.gx[p];
                let ay = 2.0 * de[p] * fwd.gy[p];
                for dr in 0..3 {
                    let rr = clamp_idx(r as i64 + dr as i64 - 1, h);
                    for dc in 0..3 {
                        let cc = clamp_idx(c as i64 + dc as i64 - 1, w);
                        dgray[rr * w + cc] += ax * SOBEL_X[dr][dc] + ay * SOBEL_Y[dr][dc];
                    }
                }
            }
        }
        let mut out = Field3::zeros(h, w);
        for (px, g) in out.as_mut_slice().chunks_exact_mut(CHANNELS).zip(&dgray) {
            for (v, cw) in px.iter_mut().zip(&self.channel_weights) {
                *v = g * cw;
            }
        }
        out
    }
}

fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

fn span_mean(values: &[f64], width: usize, span: (usize, usize, usize, usize)) -> f64 {
    let (r0, r1, c0, c1) = span;
    let n = (r1 - r0) * (c1 - c0);
    if n == 0 {
        return 0.0;
    }
    let mut s = 0.0;
    for r in r0..r1 {
        s += values[r * width + c0..r * width + c1].iter().sum::<f64>();
    }
    s / n as f64
}

/// Adds `d / |span|` to every pixel of the span (derivative of a span mean).
fn add_span(de: &mut [f64], width: usize, span: (usize, usize, usize, usize), d: f64) {
    let (r0, r1, c0, c1) = span;
    let n = (r1 - r0) * (c1 - c0);
    if n == 0 {
        return;
    }
    let per = d / n as f64;
    for r in r0..r1 {
        for v in &mut de[r * width + c0..r * width + c1] {
            *v += per;
        }
    }
}

impl Oracle for EdgeDetector {
    fn capabilities(&self) -> Capabilities {
        Capabilities::full()
    }

    fn evaluate(&self, image: &ImagePlane, objective: &Objective) -> Result<OracleReport> {
        self.run(image, objective, false)
    }

    fn evaluate_with_gradient(&self, image: &ImagePlane, objective: &Objective) -> Result<OracleReport> {
        self.run(image, objective, true)
    }
}
