use super::{
    check_target_category, hashed_uniform, log_one_minus_sigmoid, log_softmax, sigmoid, Capabilities, Objective,
    ObjectiveKind, Oracle, OracleReport, DEFAULT_CLASSES, LOG_FLOOR,
};
use crate::error::Result;
use crate::model::{BinaryMask, Detection, Field3, ImagePlane, PerturbationTexture, CHANNELS};

/// Toy detector with a linear score over the target box.
///
/// Objectness is `s = σ(Σ w·x + b)` summed over every entry inside the target
/// box. Class logits come from `classes` further linear heads over the same
/// entries. Weights are addressed by (head, row, col, channel) and derived from
/// the seed, so the detector works for any image size.
///
/// The predicted box is always the target box, so box-shift is a no-op here.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDetector {
    pub seed: u64,
    pub bias: f64,
    pub weight_scale: f64,
    pub classes: usize,
}

impl LinearDetector {
    pub fn new(seed: u64) -> Self {
        Self { seed, bias: 2.0, weight_scale: 0.5, classes: DEFAULT_CLASSES }
    }

    pub fn with_bias(mut self, bias: f64) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_weight_scale(mut self, scale: f64) -> Self {
        self.weight_scale = scale;
        self
    }

    /// Weight of head `head` at (row, col, ch); head 0 is objectness, heads
    /// `1..=classes` are the class logits.
    pub fn weight(&self, head: usize, row: usize, col: usize, ch: usize) -> f64 {
        self.weight_scale * hashed_uniform(self.seed, &[head as u64, row as u64, col as u64, ch as u64])
    }

    fn class_bias(&self, k: usize) -> f64 {
        0.5 * hashed_uniform(self.seed ^ 0xC1A5_5B1A, &[k as u64])
    }

    /// Objectness weights as a full field (zero outside the target box).
    pub fn objectness_weights(&self, height: usize, width: usize, objective: &Objective) -> Field3 {
        let mut w = Field3::zeros(height, width);
        let (r0, r1, c0, c1) = objective.target.bbox.pixel_span(height, width);
        for r in r0..r1 {
            for c in c0..c1 {
                for ch in 0..CHANNELS {
                    w.set(r, c, ch, self.weight(0, r, c, ch));
                }
            }
        }
        w
    }

    fn head_logit(&self, head: usize, image: &ImagePlane, span: (usize, usize, usize, usize)) -> f64 {
        let (r0, r1, c0, c1) = span;
        let mut z = 0.0;
        for r in r0..r1 {
            for c in c0..c1 {
                for ch in 0..CHANNELS {
                    z += self.weight(head, r, c, ch) * image.get(r, c, ch);
                }
            }
        }
        z
    }

    fn run(&self, image: &ImagePlane, objective: &Objective, want_grad: bool) -> Result<OracleReport> {
        let y = check_target_category(objective, self.classes)?;
        let (h, w) = image.dims();
        let span = objective.target.bbox.pixel_span(h, w);
        let z = self.bias + self.head_logit(0, image, span);
        let s = sigmoid(z);
        let logits: Vec<f64> =
            (0..self.classes).map(|k| self.class_bias(k) + self.head_logit(k + 1, image, span)).collect();
        let (logp_y, probs) = log_softmax(&logits, y);
        let category = argmax(&logits) as u32;

        // d value / d (head logit) for head 0 and for the class heads.
        let (value, obj_coef, class_coefs): (f64, f64, Vec<f64>) = match objective.kind {
            ObjectiveKind::Vanishing => {
                let raw = log_one_minus_sigmoid(z);
                if raw <= LOG_FLOOR {
                    (LOG_FLOOR, 0.0, vec![0.0; self.classes])
                } else {
                    (raw, -s, vec![0.0; self.classes])
                }
            }
            ObjectiveKind::Mislabel => {
                let raw = -logp_y;
                if raw >= -LOG_FLOOR {
                    (-LOG_FLOOR, 0.0, vec![0.0; self.classes])
                } else {
                    let coefs = (0..self.classes).map(|k| probs[k] - if k == y { 1.0 } else { 0.0 }).collect();
                    (raw, 0.0, coefs)
                }
            }
            ObjectiveKind::BoxShift => (-1.0, 0.0, vec![0.0; self.classes]),
        };

        let grad = want_grad.then(|| {
            let mut g = Field3::zeros(h, w);
            let (r0, r1, c0, c1) = span;
            for r in r0..r1 {
                for c in c0..c1 {
                    for ch in 0..CHANNELS {
                        let mut v = obj_coef * self.weight(0, r, c, ch);
                        for (k, coef) in class_coefs.iter().enumerate() {
                            if *coef != 0.0 {
                                v += coef * self.weight(k + 1, r, c, ch);
                            }
                        }
                        g.set(r, c, ch, v);
                    }
                }
            }
            g
        });

        Ok(OracleReport {
            value,
            grad,
            detections: vec![Detection { bbox: objective.target.bbox, score: s, category }],
        })
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

impl Oracle for LinearDetector {
    fn capabilities(&self) -> Capabilities {
        Capabilities::full()
    }

    fn evaluate(&self, image: &ImagePlane, objective: &Objective) -> Result<OracleReport> {
        self.run(image, objective, false)
    }

    fn evaluate_with_gradient(&self, image: &ImagePlane, objective: &Objective) -> Result<OracleReport> {
        self.run(image, objective, true)
    }

    /// For vanishing, the optimum on each selected entry is 0 where the
    /// objectness weight is positive and 1 where it is negative.
    fn closed_form_texture(
        &self,
        image: &ImagePlane,
        objective: &Objective,
        mask: &BinaryMask,
    ) -> Option<PerturbationTexture> {
        if objective.kind != ObjectiveKind::Vanishing || mask.dims() != image.dims() {
            return None;
        }
        let (h, w) = image.dims();
        let (r0, r1, c0, c1) = objective.target.bbox.pixel_span(h, w);
        let mut field = image.field().clone();
        for p in mask.indices() {
            let (r, c) = (p / w, p % w);
            if !(r0..r1).contains(&r) || !(c0..c1).contains(&c) {
                continue;
            }
            for ch in 0..CHANNELS {
                let wt = self.weight(0, r, c, ch);
                if wt > 0.0 {
                    field.set(r, c, ch, 0.0);
                } else if wt < 0.0 {
                    field.set(r, c, ch, 1.0);
                }
            }
        }
        PerturbationTexture::new(field).ok()
    }
}
