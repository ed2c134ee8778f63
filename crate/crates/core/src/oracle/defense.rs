use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Capabilities, Objective, Oracle, OracleReport};
use crate::error::{AscError, Result};
use crate::model::{Field3, ImagePlane, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DefenseKind {
    GaussianSmoothing { sigma: f64 },
    BilateralFiltering { sigma_x: f64, sigma_y: f64, sigma_r: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
}

impl DefenseSpec {
    pub fn gaussian(sigma: f64) -> Self {
        Self { kind: DefenseKind::GaussianSmoothing { sigma } }
    }

    pub fn bilateral(sigma_x: f64, sigma_y: f64, sigma_r: f64) -> Self {
        Self { kind: DefenseKind::BilateralFiltering { sigma_x, sigma_y, sigma_r } }
    }

    /// Gaussian smoothing with σ = 4.
    pub fn default_gaussian() -> Self {
        Self::gaussian(4.0)
    }

    /// Bilateral filtering with σx = σy = σr = 1.5.
    pub fn default_bilateral() -> Self {
        Self::bilateral(1.5, 1.5, 1.5)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            DefenseKind::GaussianSmoothing { sigma } => sigma > 0.0,
            DefenseKind::BilateralFiltering { sigma_x, sigma_y, sigma_r } => {
                sigma_x > 0.0 && sigma_y > 0.0 && sigma_r > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(AscError::ContractViolation(format!("defense sigmas must be positive: {self:?}")))
        }
    }

    pub fn apply(&self, image: &ImagePlane) -> ImagePlane {
        match self.kind {
            DefenseKind::GaussianSmoothing { sigma } => gaussian_blur(image, sigma),
            DefenseKind::BilateralFiltering { sigma_x, sigma_y, sigma_r } => bilateral(image, sigma_x, sigma_y, sigma_r),
        }
    }
}

/// Oracle that sees a smoothed image. Gradients follow BPDA: the exact
/// transpose of the Gaussian filter, identity through the bilateral filter.
#[derive(Clone)]
pub struct DefendedOracle {
    inner: Arc<dyn Oracle>,
    defense: DefenseSpec,
}

impl DefendedOracle {
    pub fn new(inner: Arc<dyn Oracle>, defense: DefenseSpec) -> Result<Self> {
        defense.validate()?;
        if !inner.capabilities().grad {
            return Err(AscError::Capability("defended oracle needs a gradient-capable base".into()));
        }
        Ok(Self { inner, defense })
    }

    pub fn defense(&self) -> &DefenseSpec {
        &self.defense
    }
}

impl Oracle for DefendedOracle {
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn evaluate(&self, image: &ImagePlane, objective: &Objective) -> Result<OracleReport> {
        self.inner.evaluate(&self.defense.apply(image), objective)
    }

    fn evaluate_with_gradient(&self, image: &ImagePlane, objective: &Objective) -> Result<OracleReport> {
        let mut report = self.inner.evaluate_with_gradient(&self.defense.apply(image), objective)?;
        let grad = report.grad.take().ok_or_else(|| AscError::Capability("base oracle returned no gradient".into()))?;
        report.grad = Some(match self.defense.kind {
            DefenseKind::GaussianSmoothing { sigma } => gaussian_transpose(&grad, sigma),
            DefenseKind::BilateralFiltering { .. } => grad,
        });
        Ok(report)
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(0.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// 1-D pass along rows (`horizontal`) or columns with replicate borders.
/// With `transpose` the adjoint operator is applied instead.
fn pass(field: &Field3, kernel: &[f64], horizontal: bool, transpose: bool) -> Field3 {
    let (h, w) = field.dims();
    let radius = (kernel.len() / 2) as i64;
    let mut out = Field3::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            for (i, k) in kernel.iter().enumerate() {
                let off = i as i64 - radius;
                let (sr, sc) = if horizontal {
                    (r, (c as i64 + off).clamp(0, w as i64 - 1) as usize)
                } else {
                    ((r as i64 + off).clamp(0, h as i64 - 1) as usize, c)
                };
                for ch in 0..CHANNELS {
                    if transpose {
                        let v = out.get(sr, sc, ch) + k * field.get(r, c, ch);
                        out.set(sr, sc, ch, v);
                    } else {
                        let v = out.get(r, c, ch) + k * field.get(sr, sc, ch);
                        out.set(r, c, ch, v);
                    }
                }
            }
        }
    }
    out
}

/// Separable Gaussian blur with replicate borders, radius ⌈3σ⌉.
pub fn gaussian_blur(image: &ImagePlane, sigma: f64) -> ImagePlane {
    let k = gaussian_kernel(sigma);
    let mut out = pass(&pass(image.field(), &k, true, false), &k, false, false);
    out.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    ImagePlane::new(out).expect("convex combination stays in range")
}

fn gaussian_transpose(grad: &Field3, sigma: f64) -> Field3 {
    let k = gaussian_kernel(sigma);
    pass(&pass(grad, &k, false, true), &k, true, true)
}

fn bilateral(image: &ImagePlane, sigma_x: f64, sigma_y: f64, sigma_r: f64) -> ImagePlane {
    let (h, w) = image.dims();
    let rx = (2.0 * sigma_x).ceil() as i64;
    let ry = (2.0 * sigma_y).ceil() as i64;
    let mut out = Field3::zeros(h, w);
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            for ch in 0..CHANNELS {
                let center = image.get(r as usize, c as usize, ch);
                let (mut num, mut den) = (0.0, 0.0);
                for dr in -ry..=ry {
                    let rr = (r + dr).clamp(0, h as i64 - 1) as usize;
                    for dc in -rx..=rx {
                        let cc = (c + dc).clamp(0, w as i64 - 1) as usize;
                        let v = image.get(rr, cc, ch);
                        let spatial = (dc * dc) as f64 / (2.0 * sigma_x * sigma_x) + (dr * dr) as f64 / (2.0 * sigma_y * sigma_y);
                        let range = (v - center).powi(2) / (2.0 * sigma_r * sigma_r);
                        let wgt = (-spatial - range).exp();
                        num += wgt * v;
                        den += wgt;
                    }
                }
                out.set(r as usize, c as usize, ch, (num / den).clamp(0.0, 1.0));
            }
        }
    }
    ImagePlane::new(out).expect("convex combination stays in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BBox, ObjectTarget};
    use crate::oracle::testutil::{max_fd_error, random_image};
    use crate::oracle::{EdgeDetector, LinearDetector};

    fn obj() -> Objective {
        Objective::vanishing(ObjectTarget::new(BBox::new(1.0, 1.0, 6.0, 6.0), 0))
    }

    #[test]
    fn tiny_sigma_is_identity() {
        let base = LinearDetector::new(2);
        let img = random_image(8, 8, 3);
        let wrapped = DefendedOracle::new(Arc::new(base.clone()), DefenseSpec::gaussian(1e-3)).unwrap();
        assert_eq!(wrapped.evaluate(&img, &obj()).unwrap().value, base.evaluate(&img, &obj()).unwrap().value);
    }

    #[test]
    fn gaussian_linear_gradient_is_filtered_weights() {
        let base = LinearDetector::new(2);
        let img = random_image(8, 8, 3);
        let sigma = 1.0;
        let wrapped = DefendedOracle::new(Arc::new(base.clone()), DefenseSpec::gaussian(sigma)).unwrap();
        let r = wrapped.evaluate_with_gradient(&img, &obj()).unwrap();
        let s = r.detections[0].score;
        // Chain rule: d/dx log(1 - σ(w·Kx + b)) = -s · Kᵀw.
        let w = base.objectness_weights(8, 8, &obj());
        let kt_w = gaussian_transpose(&w, sigma);
        for (g, e) in r.grad.unwrap().as_slice().iter().zip(kt_w.as_slice()) {
            assert!((g + s * e).abs() < 1e-12);
        }
        // Exact transpose, so the gradient also matches finite differences.
        assert!(max_fd_error(&wrapped, &img, &obj(), 20, 1) < 1e-4);
    }

    #[test]
    fn transpose_is_adjoint() {
        let a = random_image(7, 9, 1).into_field();
        let b = random_image(7, 9, 2).into_field();
        let k = gaussian_kernel(1.3);
        let ka = pass(&pass(&a, &k, true, false), &k, false, false);
        let ktb = gaussian_transpose(&b, 1.3);
        let lhs: f64 = ka.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.as_slice().iter().zip(ktb.as_slice()).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bilateral_passes_gradient_through() {
        let base = EdgeDetector::with_params(1, 0.05, -0.5);
        let img = random_image(8, 8, 4);
        let spec = DefenseSpec::default_bilateral();
        let wrapped = DefendedOracle::new(Arc::new(base.clone()), spec).unwrap();
        let filtered = spec.apply(&img);
        let direct = base.gradient(&filtered, &obj()).unwrap();
        assert_eq!(wrapped.gradient(&img, &obj()).unwrap(), direct);
        assert_ne!(filtered, img);
    }

    #[test]
    fn caller_image_is_untouched() {
        let img = random_image(8, 8, 4);
        let copy = img.clone();
        let wrapped = DefendedOracle::new(Arc::new(LinearDetector::new(1)), DefenseSpec::default_gaussian()).unwrap();
        wrapped.evaluate_with_gradient(&img, &obj()).unwrap();
        assert_eq!(img, copy);
    }

    #[test]
    fn rejects_nonpositive_sigma() {
        assert!(DefendedOracle::new(Arc::new(LinearDetector::new(1)), DefenseSpec::gaussian(0.0)).is_err());
        assert!(DefenseSpec::bilateral(1.0, -1.0, 1.0).validate().is_err());
    }
}
