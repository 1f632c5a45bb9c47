//! Group-relative advantages, the clipped surrogate and the KL penalty.
//!
//! Scalar functions operate on plain slices; [`sequence_terms`] builds the
//! same quantities on an autodiff [`Graph`] so the policy can be updated.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STD_GUARD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self { clip_eps: 0.2, kl_beta: 0.2 }
    }
}

/// `(r_i - mean) / max(std_pop, δ)`.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    let rough = rewards.iter().sum::<f64>() / n;
    // one refinement pass so constant groups centre to exactly zero
    let mean = rough + rewards.iter().map(|r| r - rough).sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let denom = std.max(STD_GUARD);
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// Per-token likelihood ratios `exp(lp_new - lp_old)`.
pub fn ratios(new: &[f64], old: &[f64]) -> Result<Vec<f64>> {
    if new.len() != old.len() {
        return Err(Error::InvalidInput(format!("{} vs {} log-probs", new.len(), old.len())));
    }
    if !new.iter().chain(old).all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite log-probability".into()));
    }
    Ok(new.iter().zip(old).map(|(a, b)| (a - b).exp()).collect())
}

pub fn clip_term(r: f64, adv: f64, eps: f64) -> f64 {
    (r * adv).min(r.clamp(1.0 - eps, 1.0 + eps) * adv)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Clipped surrogate averaged over each sequence's tokens, then over the group.
pub fn clipped_surrogate(ratios: &[Vec<f64>], advantages: &[f64], eps: f64) -> f64 {
    assert_eq!(ratios.len(), advantages.len());
    let per_seq: Vec<f64> = ratios
        .iter()
        .zip(advantages)
        .map(|(rs, &a)| mean(&rs.iter().map(|&r| clip_term(r, a, eps)).collect::<Vec<_>>()))
        .collect();
    mean(&per_seq)
}

/// Per-token `ρ - ln ρ - 1` with `ρ = π_ref / π_θ`.
pub fn kl_unbiased(policy: &[f64], reference: &[f64]) -> Vec<f64> {
    assert_eq!(policy.len(), reference.len());
    policy
        .iter()
        .zip(reference)
        .map(|(p, r)| {
            let d = r - p;
            d.exp() - d - 1.0
        })
        .collect()
}

/// KL averaged per sequence, then over the group.
pub fn kl_mean(policy: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
    let per_seq: Vec<f64> = policy.iter().zip(reference).map(|(p, r)| mean(&kl_unbiased(p, r))).collect();
    mean(&per_seq)
}

/// Objective to maximize.
pub fn grpo_objective(l_pi: f64, kl: f64, beta: f64) -> f64 {
    l_pi - beta * kl
}

/// Differentiable per-sequence terms.
pub struct SequenceTerms {
    /// Token-mean clipped surrogate.
    pub surrogate: Var,
    /// Token-mean KL estimate.
    pub kl: Var,
    /// Number of tokens whose ratio lies outside `[1-ε, 1+ε]`.
    pub clipped: usize,
}

/// Builds the clipped surrogate and KL for one sequence from differentiable
/// current log-probs `logp[T]` and constant old/reference log-probs.
pub fn sequence_terms(
    g: &mut Graph,
    logp: Var,
    old: &[f64],
    reference: &[f64],
    advantage: f64,
    eps: f64,
) -> SequenceTerms {
    let n = g.value(logp).len();
    assert!(n > 0 && old.len() == n && reference.len() == n);
    let old_v = g.constant(Tensor::new(&[n], old.to_vec()));
    let diff = g.sub(logp, old_v);
    let ratio = g.exp(diff);
    let clipped = g.value(ratio).data().iter().filter(|&&r| (r - 1.0).abs() > eps).count();
    let unclipped_term = g.scale(ratio, advantage);
    let clamped = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let clipped_term = g.scale(clamped, advantage);
    let per_token = g.minimum(unclipped_term, clipped_term);
    let surrogate = g.mean(per_token);

    let ref_v = g.constant(Tensor::new(&[n], reference.to_vec()));
    let d = g.sub(ref_v, logp);
    let rho = g.exp(d);
    let k = g.sub(rho, d);
    let k = g.add_scalar(k, -1.0);
    let kl = g.mean(k);
    SequenceTerms { surrogate, kl, clipped }
}
