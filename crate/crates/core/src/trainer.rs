//! Single-process training loop: sample a group of rollouts per prompt,
//! score them, standardize rewards within the group, then take one AdamW
//! step on the GRPO objective plus the segmentation loss.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::grpo::{group_advantages, sequence_terms, GrpoConfig};
use crate::maskdec::{logits_to_canvas, DecoderConfig};
use crate::model::{Model, ModelConfig, Prepared, SegOutput};
use crate::params::{Gradients, ParamGroup, ParamStore};
use crate::policy::{PolicyConfig, Rollout, Sampling};
use crate::prior::{FuseActivation, PriorConfig};
use crate::rewards::{format_score, mask_components, total_reward, RewardBreakdown};
use crate::segloss::{seg_loss, LossWeights};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// GRPO objective plus segmentation loss.
    Joint,
    /// GRPO objective only; segmentation modules stay fixed.
    RlOnly,
    /// Segmentation loss only.
    SegOnly,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Mode::Joint),
            "rl_only" => Ok(Mode::RlOnly),
            "seg_only" => Ok(Mode::SegOnly),
            _ => Err(Error::InvalidConfig(format!("unknown mode {s:?}"))),
        }
    }
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Joint => "joint",
            Mode::RlOnly => "rl_only",
            Mode::SegOnly => "seg_only",
        }
    }

    fn uses_grpo(self) -> bool {
        self != Mode::SegOnly
    }

    fn uses_seg(self) -> bool {
        self != Mode::RlOnly
    }

    /// Whether `group` is updated by the optimizer in this mode.
    pub fn trains(self, group: ParamGroup) -> bool {
        self != Mode::RlOnly || !group.is_segmentation()
    }
}

/// Which segmentation modules decode the masks used for reward scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMasks {
    /// Frozen reference policy and reference segmentation modules.
    Reference,
    /// Current actor modules, evaluated without gradient.
    Actor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupMultipliers {
    pub policy: f64,
    pub query_head: f64,
    pub prior: f64,
    pub decoder: f64,
}

impl Default for GroupMultipliers {
    fn default() -> Self {
        Self { policy: 1.0, query_head: 25.0, prior: 10.0, decoder: 5.0 }
    }
}

impl GroupMultipliers {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Policy => self.policy,
            ParamGroup::QueryHead => self.query_head,
            ParamGroup::Prior => self.prior,
            ParamGroup::Decoder => self.decoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub multipliers: GroupMultipliers,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Final learning rate as a fraction of the peak.
    pub end_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 2e-6,
            multipliers: GroupMultipliers::default(),
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            end_factor: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn peak_lr(&self, group: ParamGroup) -> f64 {
        self.base_lr * self.multipliers.get(group)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.multipliers;
        let positive = [self.base_lr, m.policy, m.query_head, m.prior, m.decoder];
        if positive.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("learning rates must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0 && (0.0..=1.0).contains(&self.end_factor)) {
            return Err(Error::InvalidConfig("weight decay, clip and end factor out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub group_size: usize,
    pub mode: Mode,
    pub reward_masks: RewardMasks,
    /// Copy the actor into the reference every this many steps; 0 never.
    pub reference_refresh: usize,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Devices requested; training always runs in one process.
    pub devices: usize,
    /// Also backpropagate the GRPO term alone to report its gradient norm.
    pub diagnostics: bool,
    pub grpo: GrpoConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1000,
            batch_size: 16,
            group_size: 8,
            mode: Mode::Joint,
            reward_masks: RewardMasks::Reference,
            reference_refresh: 0,
            checkpoint_every: 0,
            devices: 1,
            diagnostics: false,
            grpo: GrpoConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale joint run used for the end-to-end checks and `configs/toy_train.toml`.
    pub fn toy() -> Self {
        let d = 64;
        let mut cfg = Self {
            steps: 3000,
            batch_size: 4,
            group_size: 8,
            reward_masks: RewardMasks::Actor,
            ..Self::default()
        };
        cfg.grpo.kl_beta = 0.02;
        cfg.loss.lambda_seg = 15.0;
        cfg.loss.switch_step = 100_000;
        cfg.optim.base_lr = 3e-4;
        cfg.optim.grad_clip = 1.0;
        cfg.model = ModelConfig {
            policy_max_pixels: 32 * 32,
            policy: PolicyConfig { d_model: d, n_layers: 2, n_heads: 4, d_ff: 2 * d, max_positions: 32, image_channels: vec![8, 16] },
            prior: PriorConfig {
                canvas: 64,
                encoder_channels: vec![16, 24],
                encoder_strides: vec![2, 2],
                encoder_attention_layers: 0,
                encoder_heads: 4,
                d_k: 32,
                d_q: 32,
                n_heads: 4,
                d_head: 8,
                fuse_hidden: 8,
                fuse_activation: FuseActivation::Silu,
                prior_res: 32,
            },
            decoder: DecoderConfig { prior_channels: 8, token_dim: 16, prior_token_side: 8, rounds: 1, heads: 2, mlp_hidden: 32, out_hidden: 16 },
            sampling: Sampling { temperature: 1.0, top_p: 1.0, max_len: 10 },
        };
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `PRIORSEG_SEED` and `PRIORSEG_DEVICES` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_overrides(std::env::var("PRIORSEG_SEED").ok(), std::env::var("PRIORSEG_DEVICES").ok())
    }

    fn apply_overrides(&mut self, seed: Option<String>, devices: Option<String>) -> Result<()> {
        if let Some(s) = seed {
            self.seed = s.trim().parse().map_err(|_| Error::InvalidConfig(format!("PRIORSEG_SEED={s:?}")))?;
        }
        if let Some(d) = devices {
            self.devices = d.trim().parse().map_err(|_| Error::InvalidConfig(format!("PRIORSEG_DEVICES={d:?}")))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 || self.batch_size == 0 || self.devices == 0 {
            return Err(Error::InvalidConfig("group size, batch size and devices must be at least 1".into()));
        }
        if !(self.grpo.clip_eps > 0.0 && self.grpo.clip_eps < 1.0 && self.grpo.kl_beta >= 0.0) {
            return Err(Error::InvalidConfig("clip_eps must lie in (0,1) and kl_beta be nonnegative".into()));
        }
        self.loss.validate()?;
        self.optim.validate()?;
        self.model.validate()
    }
}

/// Cosine decay from `peak` at step 0 to `peak · end_factor` at `total`.
pub fn lr_schedule(step: usize, total: usize, peak: f64, end_factor: f64) -> f64 {
    if total == 0 {
        return peak;
    }
    let progress = step.min(total) as f64 / total as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    peak * (end_factor + (1.0 - end_factor) * cos)
}

/// AdamW with decoupled weight decay and per-group learning rates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update. `lr(group)` of `None` leaves that group untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        cfg: &OptimConfig,
        lr: impl Fn(ParamGroup) -> Option<f64>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(rate) = lr(store.group(id)) else { continue };
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads.get(id).map(Tensor::data);
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= rate * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * p[j]);
            }
        }
    }

    fn flatten(&self) -> Vec<f64> {
        self.m.iter().chain(&self.v).flat_map(|t| t.data().iter().copied()).collect()
    }

    fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.m.iter().chain(&self.v).map(Tensor::len).sum();
        if flat.len() != total {
            return Err(Error::Checkpoint("optimizer state size mismatch".into()));
        }
        let mut off = 0;
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Optimizer over `store` after validating the configuration.
pub fn build_optimizer(store: &ParamStore, cfg: &OptimConfig) -> Result<AdamW> {
    cfg.validate()?;
    Ok(AdamW::new(store))
}

/// One record per training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mode: Mode,
    pub lr_policy: f64,
    pub lr_query_head: f64,
    pub lr_prior: f64,
    pub lr_decoder: f64,
    pub loss: f64,
    pub grpo_objective: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub seg_loss: f64,
    pub bce_prior: f64,
    pub dice_loss: f64,
    pub focal_loss: f64,
    pub one_minus_bce: f64,
    pub one_minus_dice: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub mask_score_mean: f64,
    pub format_mean: f64,
    pub format_full_frac: f64,
    pub ref_pos_frac: f64,
    pub hard_iou_mean: f64,
    pub clip_frac: f64,
    pub mean_length: f64,
    pub grad_norm: f64,
    pub grpo_grad_norm: Option<f64>,
    pub skipped: bool,
}

#[derive(Default)]
struct Accum {
    n_samples: f64,
    loss: f64,
    objective: f64,
    surrogate: f64,
    kl: f64,
    seg: f64,
    bce: f64,
    dice: f64,
    focal: f64,
    rewards: Vec<f64>,
    mask_score: f64,
    format: f64,
    format_full: f64,
    ref_pos: f64,
    hard_iou: f64,
    clipped: f64,
    tokens: f64,
    grpo_grads: Option<Gradients>,
}

/// Per-sample outcome of the forward/backward pass.
struct SampleResult {
    grads: Gradients,
    grpo_grads: Option<Gradients>,
    finite: bool,
}

/// Distinct items in first-appearance order with their multiplicities, and
/// the slot each input maps to.
fn dedup<K: PartialEq + Clone>(keys: &[K]) -> (Vec<(K, usize)>, Vec<usize>) {
    let mut uniq: Vec<(K, usize)> = Vec::new();
    let mut slot = Vec::with_capacity(keys.len());
    for k in keys {
        match uniq.iter().position(|(u, _)| u == k) {
            Some(i) => {
                uniq[i].1 += 1;
                slot.push(i);
            }
            None => {
                slot.push(uniq.len());
                uniq.push((k.clone(), 1));
            }
        }
    }
    (uniq, slot)
}

/// Deterministic stream for one (seed, step, purpose) triple.
fn stream(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(purpose.wrapping_mul(0x1_0000_0000).wrapping_add(step));
    r
}

const STREAM_INIT: u64 = 1;
const STREAM_ROLLOUT: u64 = 2;
const STREAM_BATCH: u64 = 3;

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    /// Actor parameters.
    pub store: ParamStore,
    /// Frozen reference parameters.
    pub reference: ParamStore,
    pub opt: AdamW,
    /// Number of completed steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, 0, STREAM_INIT);
        let mut store = ParamStore::new();
        let model = Model::new(cfg.model.clone(), &mut store, &mut rng)?;
        let opt = build_optimizer(&store, &cfg.optim)?;
        let reference = store.clone();
        Ok(Self { cfg, model, store, reference, opt, step: 0 })
    }

    /// Peak-scaled cosine learning rate per group at `step`.
    pub fn group_lrs(&self, step: usize) -> [f64; 4] {
        ParamGroup::ALL.map(|g| lr_schedule(step, self.cfg.steps, self.cfg.optim.peak_lr(g), self.cfg.optim.end_factor))
    }

    pub fn refresh_reference(&mut self) {
        self.reference = self.store.clone();
    }

    /// Sample indices for `step`, drawn epoch by epoch without replacement.
    pub fn batch_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let b = self.cfg.batch_size;
        let mut out = Vec::with_capacity(b);
        let mut perm_epoch = usize::MAX;
        let mut perm: Vec<usize> = Vec::new();
        for k in step * b..(step + 1) * b {
            let epoch = k / n;
            if epoch != perm_epoch {
                perm = (0..n).collect();
                perm.shuffle(&mut stream(self.cfg.seed, epoch as u64, STREAM_BATCH));
                perm_epoch = epoch;
            }
            out.push(perm[k % n]);
        }
        out
    }

    /// Rollouts, rewards, advantages and the joint backward pass for one batch,
    /// followed by one optimizer update.
    pub fn train_step(&mut self, batch: &[&Prepared]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        let step = self.step;
        let lrs = self.group_lrs(step);
        let mut rng = stream(self.cfg.seed, step as u64, STREAM_ROLLOUT);
        let mut acc = Accum::default();
        let mut total = Gradients::empty(self.store.len());
        let mut finite = true;
        let scale = 1.0 / batch.len() as f64;
        for p in batch {
            let r = self.sample_pass(p, step, &mut rng, &mut acc)?;
            finite &= r.finite;
            total.merge_scaled(&r.grads, scale);
            if let Some(gg) = r.grpo_grads {
                acc.grpo_grads.get_or_insert_with(|| Gradients::empty(self.store.len())).merge_scaled(&gg, scale);
            }
        }
        finite &= total.all_finite();
        let mode = self.cfg.mode;
        let trainable_sq: f64 = ParamGroup::ALL
            .iter()
            .filter(|&&g| mode.trains(g))
            .map(|&g| total.group_sq_norm(&self.store, g))
            .sum();
        let grad_norm = trainable_sq.sqrt();
        if finite {
            let clip = self.cfg.optim.grad_clip;
            if clip > 0.0 && grad_norm > clip {
                total.scale(clip / grad_norm);
            }
            let optim = self.cfg.optim.clone();
            self.opt.step(&mut self.store, &total, &optim, |g| mode.trains(g).then(|| lrs[g as usize]));
        } else {
            log::warn!("step {step}: non-finite loss or gradient, update skipped");
        }
        self.step += 1;
        if self.cfg.reference_refresh > 0 && self.step % self.cfg.reference_refresh == 0 {
            self.refresh_reference();
        }
        let n = acc.n_samples;
        let g_total = acc.rewards.len() as f64;
        let mean_r = acc.rewards.iter().sum::<f64>() / g_total;
        let std_r = (acc.rewards.iter().map(|r| (r - mean_r).powi(2)).sum::<f64>() / g_total).sqrt();
        Ok(StepMetrics {
            step,
            mode,
            lr_policy: lrs[0],
            lr_query_head: lrs[1],
            lr_prior: lrs[2],
            lr_decoder: lrs[3],
            loss: acc.loss / n,
            grpo_objective: acc.objective / n,
            surrogate: acc.surrogate / n,
            kl: acc.kl / n,
            seg_loss: acc.seg / n,
            bce_prior: acc.bce / n,
            dice_loss: acc.dice / n,
            focal_loss: acc.focal / n,
            one_minus_bce: 1.0 - acc.bce / n,
            one_minus_dice: 1.0 - acc.dice / n,
            reward_mean: mean_r,
            reward_std: std_r,
            mask_score_mean: acc.mask_score / g_total,
            format_mean: acc.format / g_total,
            format_full_frac: acc.format_full / g_total,
            ref_pos_frac: acc.ref_pos / g_total,
            hard_iou_mean: acc.hard_iou / g_total,
            clip_frac: acc.clipped / acc.tokens.max(1.0),
            mean_length: acc.tokens / g_total,
            grad_norm,
            grpo_grad_norm: acc.grpo_grads.as_ref().map(|g| g.sq_norm().sqrt()),
            skipped: !finite,
        })
    }

    /// Mask rewards for each distinct concentration prefix using the
    /// reference policy and reference segmentation modules.
    fn reference_mask_logits(&self, p: &Prepared, prefixes: &[(Option<Vec<usize>>, usize)]) -> Result<Vec<Option<Tensor>>> {
        let model = &self.model;
        let emb = model.policy.image_embedding_plain(&self.reference, &p.policy_image);
        let mut g = Graph::new();
        let keys = model.prior.encode_keys(&mut g, &self.reference, &p.canvas_image)?;
        let d = model.policy.d_model();
        prefixes
            .iter()
            .map(|(prefix, _)| {
                let Some(prefix) = prefix else { return Ok(None) };
                let (_, hidden) = model.policy.score(&self.reference, &emb, &p.instruction, prefix)?;
                let e = g.constant(Tensor::new(&[1, d], hidden.row(prefix.len() - 1).to_vec()));
                let out = model.segment(&mut g, &self.reference, keys, e);
                Ok(Some(g.value(out.mask_logits).clone()))
            })
            .collect()
    }

    fn sample_pass(&self, p: &Prepared, step: usize, rng: &mut ChaCha8Rng, acc: &mut Accum) -> Result<SampleResult> {
        let cfg = &self.cfg;
        let model = &self.model;
        let store = &self.store;
        let gsize = cfg.group_size;
        let mode = cfg.mode;

        // rollout worker: current policy, no gradient
        let emb_plain = model.policy.image_embedding_plain(store, &p.policy_image);
        let rollouts: Vec<Rollout> = (0..gsize)
            .map(|_| model.policy.generate(store, &model.vocab, &emb_plain, &p.instruction, &cfg.model.sampling, rng))
            .collect::<Result<_>>()?;

        let seqs: Vec<Vec<usize>> = rollouts.iter().map(|r| r.tokens.clone()).collect();
        let (uniq_seq, seq_slot) = dedup(&seqs);
        let prefix_keys: Vec<Option<Vec<usize>>> =
            rollouts.iter().map(|r| r.concentration.map(|c| r.tokens[..=c].to_vec())).collect();
        let (uniq_prefix, prefix_slot) = dedup(&prefix_keys);

        // reference worker: log-probs for the KL term
        let ref_lp: Vec<Vec<f64>> = if mode.uses_grpo() {
            let ref_emb = model.policy.image_embedding_plain(&self.reference, &p.policy_image);
            uniq_seq
                .iter()
                .map(|(t, _)| model.policy.logprobs_under(&self.reference, &ref_emb, &p.instruction, t))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };

        // actor forward
        let mut g = Graph::new();
        let emb = model.policy.image_embedding(&mut g, store, &p.policy_image);
        let keys = model.prior.encode_keys(&mut g, store, &p.canvas_image)?;
        let seq_out = uniq_seq
            .iter()
            .map(|(t, _)| model.policy.forward_graph(&mut g, store, emb, &p.instruction, t))
            .collect::<Result<Vec<_>>>()?;
        let need_seg = mode.uses_seg() || cfg.reward_masks == RewardMasks::Actor;
        let seg_out: Vec<Option<SegOutput>> = if need_seg {
            uniq_prefix
                .iter()
                .map(|(prefix, _)| {
                    let e = match prefix {
                        Some(pf) => {
                            let hidden = seq_out[seq_for_prefix(&uniq_seq, pf)].hidden;
                            g.slice_rows(hidden, pf.len() - 1, 1)
                        }
                        None => model.prior.fallback_embedding(&mut g, store),
                    };
                    Some(model.segment(&mut g, store, keys, e))
                })
                .collect()
        } else {
            vec![None; uniq_prefix.len()]
        };

        // rewards
        let reward_logits: Vec<Option<Tensor>> = match cfg.reward_masks {
            RewardMasks::Actor => uniq_prefix
                .iter()
                .zip(&seg_out)
                .map(|((prefix, _), s)| prefix.as_ref().map(|_| g.value(s.expect("computed").mask_logits).clone()))
                .collect(),
            RewardMasks::Reference => self.reference_mask_logits(p, &uniq_prefix)?,
        };
        let canvas = cfg.model.canvas();
        let mut prefix_components = Vec::with_capacity(uniq_prefix.len());
        for l in &reward_logits {
            prefix_components.push(match l {
                Some(l) => mask_components(&logits_to_canvas(l, canvas)?, &p.gt_canvas, &p.record.valid_region)?,
                None => (0.0, 0.0, 0.0),
            });
        }
        let breakdowns: Vec<RewardBreakdown> = rollouts
            .iter()
            .zip(&prefix_slot)
            .map(|(r, &k)| {
                let (si, sd, hi) = prefix_components[k];
                total_reward(si, sd, hi, format_score(&r.text))
            })
            .collect();
        let totals: Vec<f64> = breakdowns.iter().map(|b| b.total).collect();
        let advantages = group_advantages(&totals);

        // objective
        let inv_g = 1.0 / gsize as f64;
        let mut grpo_var: Option<Var> = None;
        if mode.uses_grpo() {
            let mut objective: Option<Var> = None;
            for (u, (_, count)) in uniq_seq.iter().enumerate() {
                let i = seq_slot.iter().position(|&s| s == u).expect("slot exists");
                let t = sequence_terms(
                    &mut g,
                    seq_out[u].logprobs,
                    &rollouts[i].logprobs,
                    &ref_lp[u],
                    advantages[i],
                    cfg.grpo.clip_eps,
                );
                let w = *count as f64 * inv_g;
                acc.surrogate += w * g.value(t.surrogate).item();
                acc.kl += w * g.value(t.kl).item();
                acc.clipped += (t.clipped * count) as f64;
                let pen = g.scale(t.kl, cfg.grpo.kl_beta);
                let term = g.sub(t.surrogate, pen);
                let term = g.scale(term, w);
                objective = Some(match objective {
                    Some(o) => g.add(o, term),
                    None => term,
                });
            }
            grpo_var = objective;
        }
        let mut seg_var: Option<Var> = None;
        if mode.uses_seg() {
            for (k, (_, count)) in uniq_prefix.iter().enumerate() {
                let s = seg_out[k].expect("computed");
                let terms = seg_loss(&mut g, s.prior, s.mask_logits, &p.target, &cfg.loss, step)?;
                let w = *count as f64 * inv_g;
                acc.bce += w * g.value(terms.bce).item();
                acc.dice += w * g.value(terms.dice).item();
                acc.focal += w * g.value(terms.focal).item();
                let term = g.scale(terms.total, w);
                seg_var = Some(match seg_var {
                    Some(o) => g.add(o, term),
                    None => term,
                });
            }
        }
        let neg_obj = grpo_var.map(|o| g.scale(o, -1.0));
        let seg_scaled = seg_var.map(|s| g.scale(s, cfg.loss.lambda_seg));
        let loss = match (neg_obj, seg_scaled) {
            (Some(a), Some(b)) => g.add(a, b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!("every mode has at least one term"),
        };
        let loss_value = g.value(loss).item();
        let objective_value = grpo_var.map_or(0.0, |o| g.value(o).item());
        let seg_value = seg_var.map_or(0.0, |s| g.value(s).item());

        acc.n_samples += 1.0;
        acc.loss += loss_value;
        acc.objective += objective_value;
        acc.seg += seg_value;
        for (r, b) in rollouts.iter().zip(&breakdowns) {
            acc.rewards.push(b.total);
            acc.mask_score += b.mask_score;
            acc.format += b.format_score;
            acc.format_full += (b.format_score == 1.0) as u8 as f64;
            acc.ref_pos += r.concentration.is_some() as u8 as f64;
            acc.hard_iou += b.hard_iou;
            acc.tokens += r.tokens.len() as f64;
        }
        let finite = loss_value.is_finite();
        let grads = if finite { g.backward(loss) } else { Gradients::empty(store.len()) };
        let grpo_grads = match (cfg.diagnostics, grpo_var) {
            (true, Some(o)) => Some(g.backward(o)),
            (true, None) => Some(Gradients::empty(store.len())),
            _ => None,
        };
        Ok(SampleResult { grads, grpo_grads, finite })
    }

    /// Runs the remaining steps over `data`, appending metrics to `metrics_log`
    /// and writing checkpoints under `checkpoint_root` when given.
    pub fn run(
        &mut self,
        data: &[Prepared],
        metrics_log: Option<&Path>,
        checkpoint_root: Option<&Path>,
        mut on_step: impl FnMut(&StepMetrics),
    ) -> Result<Vec<StepMetrics>> {
        if data.is_empty() {
            return Err(Error::InsufficientData("no training samples".into()));
        }
        let mut log = match metrics_log {
            Some(path) => Some(
                fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?,
            ),
            None => None,
        };
        let mut all = Vec::new();
        while self.step < self.cfg.steps {
            let idx = self.batch_indices(self.step, data.len());
            let batch: Vec<&Prepared> = idx.iter().map(|&i| &data[i]).collect();
            let m = self.train_step(&batch)?;
            if let (Some(f), Some(path)) = (log.as_mut(), metrics_log) {
                let line = serde_json::to_string(&m).expect("metrics serialize");
                writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
            }
            on_step(&m);
            all.push(m);
            if let Some(root) = checkpoint_root {
                let every = self.cfg.checkpoint_every;
                if (every > 0 && self.step % every == 0) || self.step == self.cfg.steps {
                    self.save_checkpoint(&root.join(format!("step_{}", self.step)))?;
                }
            }
        }
        Ok(all)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = CheckpointMeta { step: self.step, adam_t: self.opt.t, config: self.cfg.clone(), shapes: self.store.shapes() };
        let json = serde_json::to_string_pretty(&meta).expect("checkpoint metadata serializes");
        write_bytes(&dir.join("model.json"), json.as_bytes())?;
        write_bytes(&dir.join("params.bin"), &to_le_bytes(&self.store.flatten()))?;
        write_bytes(&dir.join("reference.bin"), &to_le_bytes(&self.reference.flatten()))?;
        write_bytes(&dir.join("optimizer.bin"), &to_le_bytes(&self.opt.flatten()))
    }

    /// Restores a trainer from a checkpoint directory. `expected` (when given)
    /// must describe the same model architecture.
    pub fn load_checkpoint(dir: &Path, expected: Option<&TrainConfig>) -> Result<Self> {
        let meta = read_meta(dir)?;
        if let Some(e) = expected {
            if e.model != meta.config.model {
                return Err(Error::Checkpoint(format!("{} was trained with a different model config", dir.display())));
            }
        }
        let cfg = match expected {
            Some(e) => e.clone(),
            None => meta.config.clone(),
        };
        let mut t = Trainer::new(cfg)?;
        if t.store.shapes() != meta.shapes {
            return Err(Error::Checkpoint("parameter shapes do not match".into()));
        }
        let params = read_f64s(&dir.join("params.bin"))?;
        let reference = read_f64s(&dir.join("reference.bin"))?;
        let n = t.store.count(None);
        if params.len() != n || reference.len() != n {
            return Err(Error::Checkpoint("parameter file size mismatch".into()));
        }
        t.store.unflatten(&params);
        t.reference.unflatten(&reference);
        t.opt.unflatten(&read_f64s(&dir.join("optimizer.bin"))?)?;
        t.opt.t = meta.adam_t;
        t.step = meta.step;
        Ok(t)
    }
}

/// Index of the first unique sequence that starts with `prefix`.
fn seq_for_prefix(uniq: &[(Vec<usize>, usize)], prefix: &[usize]) -> usize {
    uniq.iter().position(|(t, _)| t.starts_with(prefix)).expect("prefix comes from a rollout")
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    step: usize,
    adam_t: u64,
    config: TrainConfig,
    shapes: std::collections::BTreeMap<String, Vec<usize>>,
}

fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join("model.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Model architecture and parameters from a checkpoint, for inference.
pub fn load_model(dir: &Path) -> Result<(Model, ParamStore, TrainConfig)> {
    let t = Trainer::load_checkpoint(dir, None)?;
    Ok((t.model, t.store, t.cfg))
}

/// Most recent `step_N` directory under `root`.
pub fn latest_checkpoint(root: &Path) -> Option<PathBuf> {
    fs::read_dir(root)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n: usize = name.strip_prefix("step_")?.parse().ok()?;
            e.path().join("model.json").exists().then_some((n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
        .map(|(_, p)| p)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_le_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("{} is truncated", path.display())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grpo::kl_mean;
    use crate::model::tests::{tiny_config, tiny_samples};
    use rand::Rng;

    #[test]
    fn shipped_toy_config_matches_constructor() {
        let cfg = TrainConfig::from_toml_str(include_str!("../../../configs/toy_train.toml")).unwrap();
        assert_eq!(cfg.to_toml_string(), TrainConfig::toy().to_toml_string());
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            steps: 4,
            batch_size: 2,
            group_size: 3,
            reward_masks: RewardMasks::Actor,
            optim: OptimConfig { base_lr: 1e-3, ..Default::default() },
            loss: LossWeights { switch_step: 2, ..Default::default() },
            model: tiny_config(),
            ..Default::default()
        }
    }

    fn prepared(t: &Trainer, n: usize) -> Vec<Prepared> {
        tiny_samples(n).iter().map(|s| t.model.prepare(s).unwrap()).collect()
    }

    #[test]
    fn schedule_endpoints_and_closed_form() {
        assert_eq!(lr_schedule(0, 100, 1.0, 0.1), 1.0);
        assert!((lr_schedule(100, 100, 1.0, 0.1) - 0.1).abs() < 1e-15);
        assert!((lr_schedule(50, 100, 1.0, 0.1) - 0.55).abs() < 1e-15);
        for s in [1, 7, 33, 99] {
            let c = (std::f64::consts::PI * s as f64 / 100.0).cos();
            let want = 2e-6 * (0.1 + 0.9 * (1.0 + c) / 2.0);
            assert!((lr_schedule(s, 100, 2e-6, 0.1) - want).abs() < 1e-20);
        }
        let o = OptimConfig::default();
        assert!((o.peak_lr(ParamGroup::QueryHead) - 5e-5).abs() < 1e-18);
        assert!((o.peak_lr(ParamGroup::Prior) - 2e-5).abs() < 1e-18);
        assert!((o.peak_lr(ParamGroup::Decoder) - 1e-5).abs() < 1e-18);
    }

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", ParamGroup::Policy, Tensor::new(&[1], vec![v]));
        s
    }

    #[test]
    fn zero_gradient_applies_only_weight_decay() {
        let mut s = scalar_store(2.0);
        let cfg = OptimConfig::default();
        let mut opt = build_optimizer(&s, &cfg).unwrap();
        opt.step(&mut s, &Gradients::empty(1), &cfg, |_| Some(0.5));
        assert_eq!(s.flatten()[0], 2.0 - 0.5 * 0.01 * 2.0);
    }

    #[test]
    fn adamw_matches_scalar_recurrence() {
        let cfg = OptimConfig { weight_decay: 0.1, ..Default::default() };
        let mut s = scalar_store(1.5);
        let mut opt = AdamW::new(&s);
        let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        let lr = 0.01;
        for t in 1..=3 {
            let gval = 2.0 * x - 1.0;
            let mut grads = Gradients::empty(1);
            grads.accumulate(s.ids().next().unwrap(), &Tensor::new(&[1], vec![gval]));
            opt.step(&mut s, &grads, &cfg, |_| Some(lr));
            m = 0.9 * m + 0.1 * gval;
            v = 0.999 * v + 0.001 * gval * gval;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * (mh / (vh.sqrt() + 1e-8) + 0.1 * x);
            assert!((s.flatten()[0] - x).abs() < 1e-15);
        }
    }

    #[test]
    fn config_parsing_and_overrides() {
        let text = "seed = 7\nmode = \"seg_only\"\n[optim]\nbase_lr = 1e-4\n[optim.multipliers]\ndecoder = 2.0\n";
        let c = TrainConfig::from_toml_str(text).unwrap();
        assert_eq!((c.seed, c.mode, c.optim.base_lr, c.optim.multipliers.decoder), (7, Mode::SegOnly, 1e-4, 2.0));
        assert_eq!(c.optim.multipliers.query_head, 25.0);
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        assert!(TrainConfig::from_toml_str("[optim.multipliers]\nvision = 3.0\n").is_err());
        assert!(TrainConfig::from_toml_str("group_size = 0\n").is_err());
        let mut c = TrainConfig::default();
        c.apply_overrides(Some("42".into()), Some("3".into())).unwrap();
        assert_eq!((c.seed, c.devices), (42, 3));
        assert!(c.apply_overrides(Some("x".into()), None).is_err());
        assert_eq!("rl_only".parse::<Mode>().unwrap(), Mode::RlOnly);
        assert!("both".parse::<Mode>().is_err());
        assert_eq!(TrainConfig::default().reference_refresh, 0);
    }

    #[test]
    fn degenerate_group_has_zero_surrogate_gradient() {
        let cfg = TrainConfig { group_size: 1, diagnostics: true, grpo: GrpoConfig { kl_beta: 0.0, ..Default::default() }, ..tiny_train_config() };
        let mut t = Trainer::new(cfg).unwrap();
        let data = prepared(&t, 3);
        let m = t.train_step(&[&data[0], &data[1]]).unwrap();
        assert_eq!(m.grpo_grad_norm, Some(0.0));
        assert!(m.grad_norm > 0.0);
    }

    #[test]
    fn seg_only_has_no_grpo_gradient() {
        let cfg = TrainConfig { mode: Mode::SegOnly, diagnostics: true, ..tiny_train_config() };
        let mut t = Trainer::new(cfg).unwrap();
        let data = prepared(&t, 2);
        let m = t.train_step(&[&data[0], &data[1]]).unwrap();
        assert_eq!(m.grpo_grad_norm, Some(0.0));
        assert_eq!(m.grpo_objective, 0.0);
    }

    #[test]
    fn rl_only_leaves_segmentation_modules_untouched() {
        let cfg = TrainConfig { mode: Mode::RlOnly, ..tiny_train_config() };
        let mut t = Trainer::new(cfg).unwrap();
        let data = prepared(&t, 2);
        let before = t.store.clone();
        t.train_step(&[&data[0], &data[1]]).unwrap();
        let mut policy_changed = false;
        for id in t.store.ids() {
            let same = t.store.get(id).data().iter().zip(before.get(id).data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if t.store.group(id).is_segmentation() {
                assert!(same, "{}", t.store.name(id));
            } else {
                policy_changed |= !same;
            }
        }
        assert!(policy_changed);
    }

    #[test]
    fn reference_is_frozen_until_refreshed() {
        let mut t = Trainer::new(tiny_train_config()).unwrap();
        let data = prepared(&t, 2);
        let initial = t.reference.clone();
        for _ in 0..3 {
            t.train_step(&[&data[0], &data[1]]).unwrap();
        }
        assert_eq!(t.reference, initial);
        assert_ne!(t.store, initial);
        t.refresh_reference();
        let p = &data[0];
        let pol = &t.model.policy;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let emb = pol.image_embedding_plain(&t.store, &p.policy_image);
        let r = pol.generate(&t.store, &t.model.vocab, &emb, &p.instruction, &t.cfg.model.sampling, &mut rng).unwrap();
        let a = pol.logprobs_under(&t.store, &emb, &p.instruction, &r.tokens).unwrap();
        let b = pol.logprobs_under(&t.reference, &emb, &p.instruction, &r.tokens).unwrap();
        assert_eq!(kl_mean(&[a], &[b]), 0.0);
    }

    #[test]
    fn reference_reward_masks_run() {
        let cfg = TrainConfig { reward_masks: RewardMasks::Reference, ..tiny_train_config() };
        let mut t = Trainer::new(cfg).unwrap();
        let data = prepared(&t, 2);
        let m = t.train_step(&[&data[0], &data[1]]).unwrap();
        assert!(m.loss.is_finite() && !m.skipped);
    }

    #[test]
    fn identical_runs_produce_identical_metrics() {
        let run = || {
            let mut t = Trainer::new(tiny_train_config()).unwrap();
            let data = prepared(&t, 5);
            t.run(&data, None, None, |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|m| !m.skipped && m.loss.is_finite()));
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { checkpoint_every: 2, ..tiny_train_config() };
        let mut full = Trainer::new(cfg.clone()).unwrap();
        let data = prepared(&full, 5);
        let log = dir.path().join("metrics.log");
        let reference = full.run(&data, Some(&log), Some(dir.path()), |_| {}).unwrap();
        assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 4);
        assert_eq!(latest_checkpoint(dir.path()).unwrap(), dir.path().join("step_4"));

        let mut resumed = Trainer::load_checkpoint(&dir.path().join("step_2"), Some(&cfg)).unwrap();
        assert_eq!(resumed.step, 2);
        let tail = resumed.run(&data, None, None, |_| {}).unwrap();
        assert_eq!(serde_json::to_string(&tail).unwrap(), serde_json::to_string(&reference[2..]).unwrap());
        assert_eq!(resumed.store, full.store);

        let (model, store, _) = load_model(&dir.path().join("step_4")).unwrap();
        let a = model.predict(&store, &data[0]).unwrap();
        let b = full.model.predict(&full.store, &data[0]).unwrap();
        assert_eq!(a.mask_logits, b.mask_logits);
        assert_eq!(a.rollout, b.rollout);

        let mut other = cfg.clone();
        other.model.policy.d_model = 8;
        other.model.policy.n_heads = 2;
        assert!(matches!(Trainer::load_checkpoint(&dir.path().join("step_4"), Some(&other)), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn non_finite_loss_skips_the_update() {
        let mut t = Trainer::new(tiny_train_config()).unwrap();
        let data = prepared(&t, 2);
        let id = t.store.find("decoder.out2.b").unwrap();
        t.store.get_mut(id).data_mut()[0] = f64::NAN;
        let before: Vec<u64> = t.store.flatten().iter().map(|v| v.to_bits()).collect();
        let m = t.train_step(&[&data[0], &data[1]]).unwrap();
        assert!(m.skipped);
        let after: Vec<u64> = t.store.flatten().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let t = Trainer::new(TrainConfig { batch_size: 3, ..tiny_train_config() }).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|s| t.batch_indices(s, 9)).collect();
        seen.sort();
        assert_eq!(seen, (0..9).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = rng.gen_range(0..100);
        assert_eq!(t.batch_indices(s, 9), t.batch_indices(s, 9));
    }
}
