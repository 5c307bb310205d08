//! Supervision objectives for multi-label logits: binary cross-entropy,
//! focal loss, and an additive angular margin (ArcFace) head.
//!
//! All losses reduce by the mean over `batch x classes`.
//!
//! ArcFace is defined for single-label softmax training. Here it is adapted
//! to multi-label targets: the angular margin is applied to every positive
//! class of a sample, and the adjusted logits are scored with binary
//! cross-entropy.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Focal,
    Arcface,
}

/// Focal loss hyperparameters.
///
/// `alpha` weights the positive term and `1 - alpha` the negative term;
/// `alpha == 1` switches the weighting off entirely (both terms weigh 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

impl FocalParams {
    pub fn new(gamma: f64, alpha: f64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!("focal gamma must be >= 0, got {gamma}")));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::config(format!("focal alpha must lie in (0, 1], got {alpha}")));
        }
        Ok(Self { gamma, alpha })
    }

    pub fn unweighted(gamma: f64) -> Self {
        Self { gamma, alpha: 1.0 }
    }

    /// (positive, negative) term weights.
    pub fn class_weights(&self) -> (f64, f64) {
        if self.alpha == 1.0 {
            (1.0, 1.0)
        } else {
            (self.alpha, 1.0 - self.alpha)
        }
    }
}

/// Scale and angular margin of an ArcFace head. The class centres are a
/// `[classes, features]` parameter owned by the classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArcMargin {
    pub scale: f64,
    pub margin: f64,
}

impl Default for ArcMargin {
    fn default() -> Self {
        Self {
            scale: 30.0,
            margin: 0.5,
        }
    }
}

impl ArcMargin {
    pub fn new(scale: f64, margin: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::config(format!("arcface scale must be positive, got {scale}")));
        }
        if !(0.0..FRAC_PI_2).contains(&margin) {
            return Err(Error::config(format!(
                "arcface margin must lie in [0, pi/2), got {margin}"
            )));
        }
        Ok(Self { scale, margin })
    }
}

/// Cosine similarity between every feature row and every class centre.
pub fn cosine_similarity<T: Element>(g: &mut Graph<T>, features: Var, centers: Var) -> Result<Var> {
    let f = g.l2_normalize_rows(features)?;
    let w = g.l2_normalize_rows(centers)?;
    g.linear(f, w, None)
}

/// Training-time ArcFace logits: margin applied on positive classes.
pub fn arcface_logits<T: Element>(
    g: &mut Graph<T>,
    features: Var,
    centers: Var,
    head: &ArcMargin,
    targets: &[T],
) -> Result<Var> {
    let cos = cosine_similarity(g, features, centers)?;
    g.arc_margin(cos, targets, T::of(head.scale), T::of(head.margin))
}

/// Label-free ArcFace logits, `scale * cos(theta)`, used for prediction.
pub fn arcface_inference_logits<T: Element>(
    g: &mut Graph<T>,
    features: Var,
    centers: Var,
    head: &ArcMargin,
) -> Result<Var> {
    let cos = cosine_similarity(g, features, centers)?;
    g.scale(cos, T::of(head.scale))
}

pub fn bce_with_logits<T: Element>(g: &mut Graph<T>, logits: Var, targets: &[T]) -> Result<Var> {
    let rows = g.bce_rows(logits, targets)?;
    g.mean(rows)
}

pub fn focal_loss<T: Element>(g: &mut Graph<T>, logits: Var, targets: &[T], params: &FocalParams) -> Result<Var> {
    let rows = focal_rows(g, logits, targets, params)?;
    g.mean(rows)
}

pub fn focal_rows<T: Element>(g: &mut Graph<T>, logits: Var, targets: &[T], params: &FocalParams) -> Result<Var> {
    let (wp, wn) = params.class_weights();
    g.focal_rows(logits, targets, T::of(params.gamma), (T::of(wp), T::of(wn)))
}

/// Plain-number focal loss of one entry.
pub fn focal_value(z: f64, y: f64, params: &FocalParams) -> f64 {
    let (wp, wn) = params.class_weights();
    crate::autodiff::focal_term(z, y, params.gamma, (wp, wn))
}

/// Plain-number BCE-with-logits of one entry.
pub fn bce_value(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn logits(g: &mut Graph<f64>, z: &[f64], cols: usize) -> Var {
        g.input(Tensor::new(vec![z.len() / cols, cols], z.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn bce_closed_forms() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[0.0], 1);
        let l = bce_with_logits(&mut g, z, &[1.0]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let l = bce_with_logits(&mut g, z, &[0.5]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let z = logits(&mut g, &[10.0], 1);
        let l = bce_with_logits(&mut g, z, &[1.0]).unwrap();
        // softplus(-10) = ln(1 + e^-10)
        assert!((g.value(l).item() - (-10.0f64).exp().ln_1p()).abs() < 1e-15);
        assert!((g.value(l).item() - 4.5399e-5).abs() < 1e-8);
    }

    #[test]
    fn bce_is_finite_for_huge_logits() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[1e4, -1e4, 1e4, -1e4], 2);
        let l = bce_with_logits(&mut g, z, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((g.value(l).item() - 5e3).abs() < 1e-9);
    }

    #[test]
    fn bce_rejects_targets_outside_unit_interval() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[0.0, 0.0], 2);
        assert!(matches!(bce_with_logits(&mut g, z, &[1.5, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(bce_with_logits(&mut g, z, &[-0.1, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn focal_closed_form_and_monotone_in_gamma() {
        let p = FocalParams::unweighted(2.0);
        assert!((focal_value(0.0, 1.0, &p) - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for gamma in [0.0, 0.5, 1.0, 2.0, 3.0, 5.0] {
            let v = focal_value(2.0, 1.0, &FocalParams::unweighted(gamma));
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn focal_rejects_soft_targets_and_bad_params() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[0.0, 0.0], 2);
        assert!(matches!(
            focal_loss(&mut g, z, &[0.5, 0.0], &FocalParams::default()),
            Err(Error::Domain(_))
        ));
        assert!(FocalParams::new(-1.0, 0.25).is_err());
        assert!(FocalParams::new(2.0, 0.0).is_err());
        assert!(FocalParams::new(2.0, 1.0).is_ok());
    }

    #[test]
    fn focal_is_finite_for_extreme_logits() {
        let p = FocalParams::default();
        for z in [-1e4, -50.0, 50.0, 1e4] {
            for y in [0.0, 1.0] {
                assert!(focal_value(z, y, &p).is_finite());
            }
        }
    }

    #[test]
    fn arcface_closed_forms() {
        let head = ArcMargin::default();
        let mut g = Graph::new();
        // two classes: centre 0 along e0, centre 1 along e1
        let centers = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let f = g.input(Tensor::new(vec![1, 2], vec![3.0, 0.0]).unwrap()).unwrap();
        let z = arcface_logits(&mut g, f, centers, &head, &[1.0, 1.0]).unwrap();
        let out = g.value(z).data();
        assert!((out[0] - 30.0 * 0.5f64.cos()).abs() < 1e-6);
        assert!((out[0] - 26.3274).abs() < 1e-4);
        // orthogonal: cos(pi/2 + 0.5) = -sin(0.5)
        assert!((out[1] + 30.0 * 0.5f64.sin()).abs() < 1e-6);
        assert!((out[1] + 14.3827).abs() < 1e-4);
    }

    #[test]
    fn arcface_rejects_zero_feature_rows() {
        let mut g = Graph::new();
        let centers = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        let f = g.input(Tensor::zeros(&[1, 2])).unwrap();
        assert!(matches!(
            arcface_logits(&mut g, f, centers, &ArcMargin::default(), &[1.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn arc_margin_parameter_validation() {
        assert!(ArcMargin::new(30.0, FRAC_PI_2).is_err());
        assert!(ArcMargin::new(0.0, 0.5).is_err());
        assert!(ArcMargin::new(1.0, 0.0).is_ok());
    }
}
