//! Rollout rewards: mask quality plus chain-of-thought format.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mask, Region};
use crate::tensor::{sigmoid, Tensor};

pub const SMOOTH: f64 = 1e-6;

pub const MASK_WEIGHT: f64 = 0.7;
pub const FORMAT_WEIGHT: f64 = 0.3;
pub const SOFT_IOU_WEIGHT: f64 = 0.5;
pub const SOFT_DICE_WEIGHT: f64 = 0.2;
pub const HARD_IOU_WEIGHT: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub soft_iou: f64,
    pub soft_dice: f64,
    pub hard_iou: f64,
    pub mask_score: f64,
    pub format_score: f64,
    pub total: f64,
}

/// Combines the mask components and the format score.
pub fn total_reward(soft_iou: f64, soft_dice: f64, hard_iou: f64, format_score: f64) -> RewardBreakdown {
    let mask_score = SOFT_IOU_WEIGHT * soft_iou + SOFT_DICE_WEIGHT * soft_dice + HARD_IOU_WEIGHT * hard_iou;
    RewardBreakdown {
        soft_iou,
        soft_dice,
        hard_iou,
        mask_score,
        format_score,
        total: MASK_WEIGHT * mask_score + FORMAT_WEIGHT * format_score,
    }
}

fn plane(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => panic!("expected single-channel map, got {s:?}"),
    }
}

fn check_shapes(p: (usize, usize), gt: &Mask, region: &Region) -> Result<()> {
    if p != gt.size() {
        return Err(Error::InvalidInput(format!("prediction {p:?} vs gt {:?}", gt.size())));
    }
    if region.top + region.height > p.0 || region.left + region.width > p.1 {
        return Err(Error::InvalidInput("valid region outside the map".into()));
    }
    Ok(())
}

/// `(Σp, Σg, Σpg)` over the valid region.
fn soft_sums(probs: &Tensor, gt: &Mask, region: &Region) -> Result<(f64, f64, f64)> {
    let (h, w) = plane(probs);
    check_shapes((h, w), gt, region)?;
    let (mut sp, mut sg, mut spg) = (0.0, 0.0, 0.0);
    for y in region.top..region.top + region.height {
        for x in region.left..region.left + region.width {
            let p = probs.data()[y * w + x];
            let g = gt.get(y, x) as u8 as f64;
            sp += p;
            sg += g;
            spg += p * g;
        }
    }
    Ok((sp, sg, spg))
}

pub fn soft_iou(probs: &Tensor, gt: &Mask, region: &Region) -> Result<f64> {
    let (sp, sg, spg) = soft_sums(probs, gt, region)?;
    Ok(spg / (sp + sg - spg + SMOOTH))
}

pub fn soft_dice(probs: &Tensor, gt: &Mask, region: &Region) -> Result<f64> {
    let (sp, sg, spg) = soft_sums(probs, gt, region)?;
    Ok(2.0 * spg / (sp + sg + SMOOTH))
}

/// Intersection over union of binary masks; 1.0 when both are empty.
pub fn hard_iou(pred: &Mask, gt: &Mask, region: &Region) -> Result<f64> {
    check_shapes(pred.size(), gt, region)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for y in region.top..region.top + region.height {
        for x in region.left..region.left + region.width {
            let (p, g) = (pred.get(y, x), gt.get(y, x));
            inter += (p && g) as usize;
            union += (p || g) as usize;
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Soft IoU, soft dice and hard IoU of canvas-resolution mask logits.
pub fn mask_components(logits: &Tensor, gt: &Mask, region: &Region) -> Result<(f64, f64, f64)> {
    let probs = logits.map(sigmoid);
    let binary = Mask::from_logits(logits);
    Ok((soft_iou(&probs, gt, region)?, soft_dice(&probs, gt, region)?, hard_iou(&binary, gt, region)?))
}

pub const THINK_OPEN_TEXT: &str = "<think>";
pub const THINK_CLOSE_TEXT: &str = "</think>";
pub const REF_POS_TEXT: &str = "<REF_POS>";

struct FormatPatterns {
    open: Regex,
    close: Regex,
    block: Regex,
    ref_pos: Regex,
    close_then_ref: Regex,
    ends_with_ref: Regex,
}

fn patterns() -> &'static FormatPatterns {
    static P: OnceLock<FormatPatterns> = OnceLock::new();
    P.get_or_init(|| FormatPatterns {
        open: Regex::new(r"<think>").unwrap(),
        close: Regex::new(r"</think>").unwrap(),
        block: Regex::new(r"(?s)<think>(.*?)</think>").unwrap(),
        ref_pos: Regex::new(r"<REF_POS>").unwrap(),
        close_then_ref: Regex::new(r"(?s)</think>.*<REF_POS>").unwrap(),
        ends_with_ref: Regex::new(r"<REF_POS>\s*$").unwrap(),
    })
}

/// The five format conditions, in order:
/// one think block with open before close, nonempty block, exactly one
/// concentration token, concentration token after the block, nothing after
/// the concentration token.
pub fn format_checks(text: &str) -> [bool; 5] {
    let p = patterns();
    let opens: Vec<_> = p.open.find_iter(text).collect();
    let closes: Vec<_> = p.close.find_iter(text).collect();
    let one_block = opens.len() == 1 && closes.len() == 1 && opens[0].start() < closes[0].start();
    let nonempty = p
        .block
        .captures(text)
        .map_or(false, |c| !c.get(1).unwrap().as_str().trim().is_empty());
    let one_ref = p.ref_pos.find_iter(text).count() == 1;
    let ref_after = p.close_then_ref.is_match(text);
    let ends = p.ends_with_ref.is_match(text);
    [one_block, nonempty, one_ref, ref_after, ends]
}

pub fn format_score(text: &str) -> f64 {
    format_checks(text).iter().filter(|&&b| b).count() as f64 / 5.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full(h: usize, w: usize) -> Region {
        Region { top: 0, left: 0, height: h, width: w }
    }

    fn probs_of(m: &Mask) -> Tensor {
        m.to_tensor()
    }

    #[test]
    fn soft_iou_examples() {
        let g = Mask::from_fn(8, 8, |y, _| y < 4);
        let r = full(8, 8);
        assert!((soft_iou(&probs_of(&g), &g, &r).unwrap() - 1.0).abs() < 1e-6);
        let d = Mask::from_fn(8, 8, |y, _| y >= 4);
        assert_eq!(soft_iou(&probs_of(&d), &g, &r).unwrap(), 0.0);
        let half = Tensor::from_fn(&[8, 8], |i| if i < 32 { 0.5 } else { 0.0 });
        let a = 32.0;
        let closed = 0.5 * a / (0.5 * a + a - 0.5 * a);
        assert!((soft_iou(&half, &g, &r).unwrap() - closed).abs() < 1e-6);
        assert!((closed - 0.5).abs() < 1e-15);
        assert!(soft_iou(&Tensor::zeros(&[4, 4]), &g, &r).is_err());
    }

    #[test]
    fn dice_and_hard_iou_examples() {
        let g = Mask::from_fn(8, 8, |y, x| y < 4 && x < 8);
        let left = Mask::from_fn(8, 8, |y, x| y < 4 && x < 4);
        let r = full(8, 8);
        assert!((soft_dice(&probs_of(&g), &g, &r).unwrap() - 1.0).abs() < 1e-6);
        let d = Mask::from_fn(8, 8, |y, _| y >= 4);
        assert_eq!(soft_dice(&probs_of(&d), &g, &r).unwrap(), 0.0);
        assert!((soft_dice(&probs_of(&left), &g, &r).unwrap() - 2.0 / 3.0).abs() < 1e-6);
        assert_eq!(hard_iou(&g, &g, &r).unwrap(), 1.0);
        assert_eq!(hard_iou(&left, &g, &r).unwrap(), 0.5);
        assert_eq!(hard_iou(&Mask::zeros(8, 8), &Mask::zeros(8, 8), &r).unwrap(), 1.0);
    }

    #[test]
    fn format_examples() {
        assert_eq!(format_score("<think>because it is red</think><REF_POS>"), 1.0);
        assert_eq!(format_checks("<REF_POS>"), [false, false, true, false, true]);
        assert!((format_score("<REF_POS>") - 0.4).abs() < 1e-15);
        assert_eq!(format_checks("<think></think><REF_POS>extra"), [true, false, true, true, false]);
        assert!((format_score("<think></think><REF_POS>extra") - 0.6).abs() < 1e-15);
        assert_eq!(format_score(""), 0.0);
        assert!((format_score("<think>a</think><REF_POS><REF_POS>") - 0.8).abs() < 1e-15);
        assert!((format_score("</think>x<think><REF_POS>") - 0.6).abs() < 1e-15);
    }

    #[test]
    fn total_reward_examples() {
        assert!((total_reward(1.0, 1.0, 1.0, 1.0).total - 1.0).abs() < 1e-15);
        assert!((total_reward(1.0, 1.0, 1.0, 0.0).total - 0.7).abs() < 1e-15);
        let r = total_reward(0.5, 2.0 / 3.0, 0.5, 1.0);
        let expected = 0.7 * (0.25 + 0.2 * 2.0 / 3.0 + 0.15) + 0.3;
        assert!((r.total - expected).abs() < 1e-12);
        assert!((r.total - 0.6733).abs() < 1e-4);
    }

    #[test]
    fn padding_sentinels_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let region = Region { top: 0, left: 0, height: 6, width: 4 };
        let gt = Mask::from_fn(8, 8, |y, x| region.contains(y, x) && rng.gen_bool(0.5));
        let logits = Tensor::from_fn(&[8, 8], |_| rng.gen_range(-3.0..3.0));
        let mut poisoned = logits.clone();
        for y in 0..8 {
            for x in 0..8 {
                if !region.contains(y, x) {
                    poisoned.data_mut()[y * 8 + x] = 1e6;
                }
            }
        }
        assert_eq!(
            mask_components(&logits, &gt, &region).unwrap(),
            mask_components(&poisoned, &gt, &region).unwrap()
        );
    }

    fn random_mask(rng: &mut ChaCha8Rng) -> Mask {
        let p = rng.gen_range(0.0..1.0);
        Mask::from_fn(8, 8, |_, _| rng.gen_bool(p))
    }

    proptest! {
        #[test]
        fn adding_true_positives_never_hurts(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_mask(&mut rng);
            let mut pred = random_mask(&mut rng);
            let r = full(8, 8);
            let before = (
                soft_iou(&probs_of(&pred), &gt, &r).unwrap(),
                soft_dice(&probs_of(&pred), &gt, &r).unwrap(),
                hard_iou(&pred, &gt, &r).unwrap(),
            );
            for y in 0..8 {
                for x in 0..8 {
                    if gt.get(y, x) && rng.gen_bool(0.5) {
                        pred.set(y, x, true);
                    }
                }
            }
            prop_assert!(soft_iou(&probs_of(&pred), &gt, &r).unwrap() >= before.0 - 1e-12);
            prop_assert!(soft_dice(&probs_of(&pred), &gt, &r).unwrap() >= before.1 - 1e-12);
            prop_assert!(hard_iou(&pred, &gt, &r).unwrap() >= before.2 - 1e-12);
        }

        #[test]
        fn total_in_unit_interval(a in 0.0f64..=1.0, b in 0.0f64..=1.0, c in 0.0f64..=1.0, f in 0usize..=5) {
            let t = total_reward(a, b, c, f as f64 / 5.0).total;
            prop_assert!((0.0..=1.0).contains(&t));
        }

        #[test]
        fn format_score_is_a_fifth_multiple(text in "(<think>|</think>|<REF_POS>| |a|b){0,8}") {
            let s = format_score(&text) * 5.0;
            prop_assert!((s - s.round()).abs() < 1e-12 && (0.0..=5.0).contains(&s));
        }
    }
}
