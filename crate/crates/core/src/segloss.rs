//! Supervised segmentation losses on the prior and the decoded mask.
//!
//! Every loss crops its inputs to the valid region first, so padding never
//! reaches the value or the gradient.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{downsample_mask, Mask, Region, TransformRecord};
use crate::tensor::Tensor;

pub const DICE_SMOOTH: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_seg: f64,
    pub dice_initial: f64,
    pub focal_initial: f64,
    pub dice: f64,
    pub focal: f64,
    /// Step at which `(dice_initial, focal_initial)` switch to `(dice, focal)`.
    pub switch_step: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_seg: 0.3,
            dice_initial: 1.5,
            focal_initial: 0.0,
            dice: 3.0,
            focal: 10.0,
            switch_step: 150,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossWeights {
    /// `(λ_d, λ_f)` in effect at `step`.
    pub fn at_step(&self, step: usize) -> (f64, f64) {
        if step < self.switch_step {
            (self.dice_initial, self.focal_initial)
        } else {
            (self.dice, self.focal)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_seg,
            self.dice_initial,
            self.focal_initial,
            self.dice,
            self.focal,
            self.focal_gamma,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::InvalidConfig("focal alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Ground truth at the prior/decoder resolution with its valid region.
#[derive(Clone, Debug, PartialEq)]
pub struct SegTarget {
    pub gt: Mask,
    pub region: Region,
}

impl SegTarget {
    pub fn new(gt_canvas: &Mask, record: &TransformRecord, res: usize) -> Result<Self> {
        Ok(Self { gt: downsample_mask(gt_canvas, res)?, region: record.valid_at(res) })
    }

    /// Valid-region ground truth as a `[1,h,w]` tensor.
    fn cropped(&self) -> Tensor {
        self.gt.crop(&self.region).to_tensor()
    }
}

fn crop_logits(g: &mut Graph, logits: Var, target: &SegTarget) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape != [1, target.gt.height(), target.gt.width()] {
        return Err(Error::InvalidInput(format!(
            "logits {shape:?} vs ground truth {:?}",
            target.gt.size()
        )));
    }
    let r = target.region;
    Ok(g.crop(logits, r.top, r.top + r.height, r.left, r.left + r.width))
}

/// Per-pixel `softplus(x) - g·x`, the stable form of binary cross entropy.
fn bce_map(g: &mut Graph, x: Var, gt: Var) -> Var {
    let sp = g.softplus(x);
    let gx = g.mul(gt, x);
    g.sub(sp, gx)
}

/// Mean binary cross entropy of prior logits over valid pixels.
pub fn bce_prior(g: &mut Graph, prior: Var, target: &SegTarget) -> Result<Var> {
    let x = crop_logits(g, prior, target)?;
    let gt = g.constant(target.cropped());
    let l = bce_map(g, x, gt);
    Ok(g.mean(l))
}

/// `1 - (2Σpg + s) / (Σp + Σg + s)` on sigmoid probabilities.
pub fn dice_loss(g: &mut Graph, logits: Var, target: &SegTarget) -> Result<Var> {
    let x = crop_logits(g, logits, target)?;
    let gt_t = target.cropped();
    let sg = gt_t.sum();
    let gt = g.constant(gt_t);
    let p = g.sigmoid(x);
    let pg = g.mul(p, gt);
    let inter = g.sum(pg);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_SMOOTH);
    let sp = g.sum(p);
    let den = g.add_scalar(sp, sg + DICE_SMOOTH);
    let ratio = g.div(num, den);
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean `α_t (1 - p_t)^γ · BCE` over valid pixels.
pub fn focal_loss(g: &mut Graph, logits: Var, target: &SegTarget, gamma: f64, alpha: f64) -> Result<Var> {
    let x = crop_logits(g, logits, target)?;
    let gt_t = target.cropped();
    let sign = gt_t.map(|v| 1.0 - 2.0 * v);
    let alpha_t = gt_t.map(|v| alpha * v + (1.0 - alpha) * (1.0 - v));
    let gt = g.constant(gt_t);
    let ce = bce_map(g, x, gt);
    // 1 - p_t = sigmoid(x) on negatives and sigmoid(-x) on positives
    let sign = g.constant(sign);
    let sx = g.mul(x, sign);
    let miss = g.sigmoid(sx);
    let modulation = if gamma == 0.0 { None } else { Some(g.powf(miss, gamma)) };
    let at = g.constant(alpha_t);
    let weighted = g.mul(at, ce);
    let per_px = match modulation {
        Some(m) => g.mul(m, weighted),
        None => weighted,
    };
    Ok(g.mean(per_px))
}

#[derive(Clone, Copy, Debug)]
pub struct SegLossTerms {
    pub total: Var,
    pub bce: Var,
    pub dice: Var,
    pub focal: Var,
}

/// `bce_prior + λ_d·dice + λ_f·focal` for one image.
pub fn seg_loss(
    g: &mut Graph,
    prior: Var,
    mask_logits: Var,
    target: &SegTarget,
    weights: &LossWeights,
    step: usize,
) -> Result<SegLossTerms> {
    let (ld, lf) = weights.at_step(step);
    let bce = bce_prior(g, prior, target)?;
    let dice = dice_loss(g, mask_logits, target)?;
    let focal = focal_loss(g, mask_logits, target, weights.focal_gamma, weights.focal_alpha)?;
    let wd = g.scale(dice, ld);
    let wf = g.scale(focal, lf);
    let t = g.add(bce, wd);
    let total = g.add(t, wf);
    Ok(SegLossTerms { total, bce, dice, focal })
}

/// Scalar to minimize: `-(grpo objective) + λ_seg · seg`.
pub fn total_loss(grpo_objective: f64, seg: f64, lambda_seg: f64) -> f64 {
    -grpo_objective + lambda_seg * seg
}
