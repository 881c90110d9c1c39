//! Hybrid segmentation loss: weighted cross-entropy plus (1 − soft dice).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Real, Tensor, Var};

/// Upper bound for the automatically derived lesion-class weight.
pub const MAX_AUTO_CLASS_WEIGHT: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight on cross-entropy.
    pub lambda: f64,
    /// Weight on dice loss.
    pub gamma: f64,
    /// One weight per class; `None` derives them from class frequencies.
    pub class_weights: Option<Vec<f64>>,
    pub smooth_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.5, gamma: 0.5, class_weights: None, smooth_eps: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |msg: String| Err(LossError::InvalidConfig(msg));
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) || !(self.lambda + self.gamma > 0.0) {
            return bad(format!("need lambda, gamma >= 0 with a positive sum (got {}, {})", self.lambda, self.gamma));
        }
        if !(self.smooth_eps > 0.0) {
            return bad(format!("smooth_eps must be positive (got {})", self.smooth_eps));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return bad(format!("class weights must be positive (got {w:?})"));
            }
        }
        Ok(())
    }

    /// Explicit weights, or background 1 and lesion = background/lesion count (capped).
    pub fn resolve_class_weights(&self, num_classes: usize, background: usize, lesion: usize) -> Result<Vec<f64>, LossError> {
        match &self.class_weights {
            Some(w) if w.len() == num_classes => Ok(w.clone()),
            Some(w) => Err(LossError::InvalidConfig(format!("{} class weights for {num_classes} classes", w.len()))),
            None => {
                let mut weights = vec![1.0; num_classes];
                if num_classes >= 2 {
                    weights[1] = imbalance_weight(background, lesion);
                }
                Ok(weights)
            }
        }
    }
}

/// Background-to-lesion voxel ratio, capped at [`MAX_AUTO_CLASS_WEIGHT`] and floored at 1.
pub fn imbalance_weight(background: usize, lesion: usize) -> f64 {
    if lesion == 0 {
        return MAX_AUTO_CLASS_WEIGHT;
    }
    (background as f64 / lesion as f64).clamp(1.0, MAX_AUTO_CLASS_WEIGHT)
}

/// Smoothed dice of lesion probabilities `p` against a binary target.
pub fn soft_dice<T: Real>(g: &mut Graph<T>, p: Var, target: &[T], smooth_eps: f64) -> Result<Var, LossError> {
    Ok(g.soft_dice(p, target, T::of(smooth_eps))?)
}

/// `1 − soft_dice`.
pub fn dice_loss<T: Real>(g: &mut Graph<T>, p: Var, target: &[T], smooth_eps: f64) -> Result<Var, LossError> {
    let dice = soft_dice(g, p, target, smooth_eps)?;
    Ok(g.affine(dice, -T::one(), T::one())?)
}

/// Pixel-mean of `−w[label]·ln q[label]`, with `q` clamped at 1e-12.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, q: Var, labels: &[usize], class_weights: &[f64]) -> Result<Var, LossError> {
    let weights: Vec<T> = class_weights.iter().map(|&w| T::of(w)).collect();
    Ok(g.cross_entropy(q, labels, &weights)?)
}

/// Graph handles for the individual loss terms and their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub cross_entropy: Var,
    pub dice_loss: Var,
    pub soft_dice: Var,
}

/// `λ·cross_entropy + γ·dice_loss`, with dice taken on class 1 of `probs` [N,C,H,W].
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    probs: Var,
    labels: &[usize],
    cfg: &LossConfig,
    class_weights: &[f64],
) -> Result<LossTerms, LossError> {
    cfg.validate()?;
    let ce = cross_entropy(g, probs, labels, class_weights)?;
    let lesion = g.select_channel(probs, 1)?;
    let target: Vec<T> = labels.iter().map(|&l| if l == 1 { T::one() } else { T::zero() }).collect();
    let dice = soft_dice(g, lesion, &target, cfg.smooth_eps)?;
    let dl = g.affine(dice, -T::one(), T::one())?;
    let weighted_ce = g.affine(ce, T::of(cfg.lambda), T::zero())?;
    let weighted_dice = g.affine(dl, T::of(cfg.gamma), T::zero())?;
    let total = g.add(weighted_ce, weighted_dice)?;
    Ok(LossTerms { total, cross_entropy: ce, dice_loss: dl, soft_dice: dice })
}

/// Scalar loss values for fixed probabilities (no gradients).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cross_entropy: f64,
    pub dice_loss: f64,
    pub soft_dice: f64,
}

pub fn evaluate_loss<T: Real>(
    probs: &Tensor<T>,
    labels: &[usize],
    cfg: &LossConfig,
    class_weights: &[f64],
) -> Result<LossValues, LossError> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let terms = total_loss(&mut g, p, labels, cfg, class_weights)?;
    let v = |var: Var| g.value(var).item().as_f64();
    Ok(LossValues {
        total: v(terms.total),
        cross_entropy: v(terms.cross_entropy),
        dice_loss: v(terms.dice_loss),
        soft_dice: v(terms.soft_dice),
    })
}
