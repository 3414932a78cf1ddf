//! Cross-entropy data term plus a soft boundary-overlap term.
//!
//! The boundary of a map is `tanh(|∇S|)` with `∇S` taken by 3×3 Sobel
//! stencils; the overlap term is the Dice form
//! `1 − 2|C ∩ Ĉ| / (|C| + |Ĉ|)` with products as intersection and sums as
//! cardinality.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::SobelAxis;
use crate::tensor::Tensor;

/// Keeps `√` differentiable where the gradient vanishes.
pub const SOBEL_DELTA: f64 = 1e-12;
/// Guards the overlap ratio against empty boundaries.
pub const OVERLAP_DELTA: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the cross-entropy term.
    pub lambda: f64,
    /// Weight of the boundary term.
    pub gamma: f64,
    /// Probabilities are clamped to `[epsilon, 1 − epsilon]` before `ln`.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            gamma: 1.0,
            epsilon: 1e-7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite() && self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative (lambda {}, gamma {})",
                self.lambda, self.gamma
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("epsilon {} must lie in (0, 0.5)", self.epsilon)));
        }
        Ok(())
    }
}

/// Soft boundary map `tanh(√(gx² + gy² + δ) − √δ)`: exactly zero where the
/// input is locally flat, strictly below one everywhere.
pub fn boundary_map(g: &mut Graph, x: Var) -> Result<Var> {
    let c = g.shape(x).c();
    if c != 1 {
        return Err(Error::shape("boundary_map", format!("expected 1 channel, got {c}")));
    }
    let gx = g.sobel(x, SobelAxis::X);
    let gy = g.sobel(x, SobelAxis::Y);
    let gx2 = g.mul(gx, gx)?;
    let gy2 = g.mul(gy, gy)?;
    let sq = g.add(gx2, gy2)?;
    let sq = g.add_scalar(sq, SOBEL_DELTA);
    let mag = g.sqrt(sq);
    let mag = g.add_scalar(mag, -SOBEL_DELTA.sqrt());
    Ok(g.tanh(mag))
}

/// `1 − 2 Σ c·ĉ / (Σ c + Σ ĉ + δ)`; symmetric in its arguments.
pub fn iou_boundary_loss(g: &mut Graph, c: Var, c_hat: Var) -> Result<Var> {
    let inter = g.mul(c, c_hat)?;
    let inter = g.sum(inter);
    let a = g.sum(c);
    let b = g.sum(c_hat);
    let denom = g.add(a, b)?;
    let denom = g.add_scalar(denom, OVERLAP_DELTA);
    let ratio = g.div(inter, denom)?;
    let scaled = g.scale(ratio, -2.0);
    Ok(g.add_scalar(scaled, 1.0))
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cross_entropy: Var,
    pub boundary: Var,
    pub total: Var,
}

/// `λ·CE(pred, gt) + γ·overlap(boundary(gt), boundary(pred))`.
pub fn total_loss(g: &mut Graph, pred: Var, gt: &Tensor, weights: &LossWeights) -> Result<LossTerms> {
    let cross_entropy = g.cross_entropy(pred, gt, weights.epsilon)?;
    let gt_var = g.constant(gt.clone());
    let c = boundary_map(g, gt_var)?;
    let c_hat = boundary_map(g, pred)?;
    let boundary = iou_boundary_loss(g, c, c_hat)?;
    let a = g.scale(cross_entropy, weights.lambda);
    let b = g.scale(boundary, weights.gamma);
    let total = g.add(a, b)?;
    Ok(LossTerms {
        cross_entropy,
        boundary,
        total,
    })
}

/// Evaluates the cross-entropy term on plain tensors.
pub fn cross_entropy_loss(pred: &Tensor, gt: &Tensor, epsilon: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = g.cross_entropy(p, gt, epsilon)?;
    g.value(l).item()
}

pub fn boundary_map_of(map: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(map.clone());
    let b = boundary_map(&mut g, x)?;
    Ok(g.value(b).clone())
}

pub fn iou_boundary_loss_of(c: &Tensor, c_hat: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(c.clone()), g.constant(c_hat.clone()));
    let l = iou_boundary_loss(&mut g, a, b)?;
    g.value(l).item()
}
