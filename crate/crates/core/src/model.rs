//! The full reasoning-segmentation model: policy, positional prior and mask
//! decoder sharing one parameter store, plus per-sample preprocessing and
//! greedy inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::geometry::{cap_pixels, to_canvas, transform_mask, Mask, TransformRecord};
use crate::maskdec::{binarize, DecoderConfig, MaskDecoder};
use crate::params::ParamStore;
use crate::policy::{Policy, PolicyConfig, Rollout, Sampling, Vocabulary};
use crate::prior::{Prior, PriorConfig};
use crate::segloss::SegTarget;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Pixel budget of the image the policy sees.
    pub policy_max_pixels: usize,
    pub policy: PolicyConfig,
    pub prior: PriorConfig,
    pub decoder: DecoderConfig,
    /// Rollout sampling during training.
    pub sampling: Sampling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            policy_max_pixels: 64 * 64,
            policy: PolicyConfig::default(),
            prior: PriorConfig::default(),
            decoder: DecoderConfig::default(),
            sampling: Sampling::default(),
        }
    }
}

impl ModelConfig {
    pub fn canvas(&self) -> usize {
        self.prior.canvas
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.prior.validate()?;
        self.decoder.validate(&self.prior)?;
        if self.policy_max_pixels == 0 {
            return Err(Error::InvalidConfig("policy_max_pixels must be positive".into()));
        }
        if self.sampling.max_len < 4 || !(self.sampling.temperature > 0.0) {
            return Err(Error::InvalidConfig("sampling needs max_len >= 4 and a positive temperature".into()));
        }
        if !(self.sampling.top_p > 0.0 && self.sampling.top_p <= 1.0) {
            return Err(Error::InvalidConfig("top_p must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// A sample mapped onto the model's working geometry.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sample_id: usize,
    pub instruction: Vec<usize>,
    /// `[3,S,S]` canvas image for the key encoder.
    pub canvas_image: Tensor,
    /// Pixel-capped original image for the policy.
    pub policy_image: Tensor,
    pub record: TransformRecord,
    pub gt_canvas: Mask,
    /// Ground truth at the prior/decoder resolution.
    pub target: SegTarget,
    /// Ground truth at the original resolution.
    pub gt: Mask,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub policy: Policy,
    pub prior: Prior,
    pub decoder: MaskDecoder,
}

/// Outputs of the segmentation path for one concentration embedding.
#[derive(Clone, Copy, Debug)]
pub struct SegOutput {
    pub prior: Var,
    pub mask_logits: Var,
}

/// Greedy inference result for one sample.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub rollout: Rollout,
    /// `[1,R,R]` prior logits.
    pub prior_logits: Tensor,
    /// `[1,R,R]` mask logits.
    pub mask_logits: Tensor,
    /// Binarized mask at the original image size.
    pub mask: Mask,
}

impl Model {
    /// Builds the model and registers all of its parameters in `store`.
    pub fn new(cfg: ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocabulary::standard();
        let policy = Policy::new(cfg.policy.clone(), vocab.len(), store, rng)?;
        let prior = Prior::new(cfg.prior.clone(), cfg.policy.d_model, store, rng)?;
        let decoder = MaskDecoder::new(cfg.decoder.clone(), &cfg.prior, store, rng)?;
        Ok(Self { cfg, vocab, policy, prior, decoder })
    }

    pub fn prepare(&self, sample: &ImageSample) -> Result<Prepared> {
        let image = sample.image_tensor();
        let (canvas_image, record) = to_canvas(&image, self.cfg.canvas())?;
        let (policy_image, _) = cap_pixels(&image, self.cfg.policy_max_pixels)?;
        let gt_canvas = transform_mask(&sample.gt, &record)?;
        let target = SegTarget::new(&gt_canvas, &record, self.cfg.prior.prior_res)?;
        Ok(Prepared {
            sample_id: sample.annotation.scene_id,
            instruction: sample.annotation.tokens.clone(),
            canvas_image,
            policy_image,
            record,
            gt_canvas,
            target,
            gt: sample.gt.clone(),
        })
    }

    /// Prior and mask logits from a `[1, d_model]` concentration embedding.
    pub fn segment(&self, g: &mut Graph, store: &ParamStore, keys: Var, e_conc: Var) -> SegOutput {
        let p = self.prior.forward(g, store, keys, e_conc);
        let mask_logits = self.decoder.forward(g, store, keys, p.prior);
        SegOutput { prior: p.prior, mask_logits }
    }

    /// Segmentation outputs for a rollout, using the fallback embedding when
    /// it carries no concentration token.
    pub fn segment_rollout(&self, g: &mut Graph, store: &ParamStore, keys: Var, rollout: &Rollout) -> SegOutput {
        let e = match rollout.concentration {
            Some(i) => {
                let d = self.policy.d_model();
                g.constant(Tensor::new(&[1, d], rollout.hidden.row(i).to_vec()))
            }
            None => self.prior.fallback_embedding(g, store),
        };
        self.segment(g, store, keys, e)
    }

    /// Deterministic decoding followed by mask prediction.
    pub fn predict(&self, store: &ParamStore, p: &Prepared) -> Result<Prediction> {
        let emb = self.policy.image_embedding_plain(store, &p.policy_image);
        let rollout = self.policy.greedy_generate(store, &self.vocab, &emb, &p.instruction, self.cfg.sampling.max_len)?;
        let mut g = Graph::new();
        let keys = self.prior.encode_keys(&mut g, store, &p.canvas_image)?;
        let out = self.segment_rollout(&mut g, store, keys, &rollout);
        let prior_logits = g.value(out.prior).clone();
        let mask_logits = g.value(out.mask_logits).clone();
        let mask = binarize(&mask_logits, &p.record)?;
        Ok(Prediction { rollout, prior_logits, mask_logits, mask })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::{generate_corpus, DatasetConfig};
    use crate::prior::FuseActivation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Very small model for fast unit tests.
    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            policy_max_pixels: 16 * 16,
            policy: PolicyConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 16, max_positions: 24, image_channels: vec![4, 8] },
            prior: PriorConfig {
                canvas: 16,
                encoder_channels: vec![4, 6],
                encoder_strides: vec![2, 2],
                encoder_attention_layers: 1,
                encoder_heads: 2,
                d_k: 6,
                d_q: 8,
                n_heads: 2,
                d_head: 4,
                fuse_hidden: 3,
                fuse_activation: FuseActivation::Silu,
                prior_res: 8,
            },
            decoder: DecoderConfig { prior_channels: 3, token_dim: 4, prior_token_side: 4, rounds: 1, heads: 2, mlp_hidden: 6, out_hidden: 3 },
            sampling: Sampling { temperature: 1.0, top_p: 1.0, max_len: 6 },
        }
    }

    pub(crate) fn tiny_samples(n: usize) -> Vec<ImageSample> {
        let cfg = DatasetConfig { scenes: n, min_side: 12, max_side: 20, min_instances: 2, max_instances: 3, min_visible: 4, min_shape_frac: 0.3, max_shape_frac: 0.5, ..Default::default() };
        generate_corpus(&cfg).unwrap().samples()
    }

    #[test]
    fn prepare_and_predict_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let m = Model::new(tiny_config(), &mut store, &mut rng).unwrap();
        for s in tiny_samples(4) {
            let p = m.prepare(&s).unwrap();
            assert_eq!(p.canvas_image.shape(), &[3, 16, 16]);
            assert_eq!(p.target.gt.size(), (8, 8));
            let pred = m.predict(&store, &p).unwrap();
            assert_eq!(pred.mask.size(), s.gt.size());
            assert_eq!(pred.prior_logits.shape(), &[1, 8, 8]);
            let again = m.predict(&store, &p).unwrap();
            assert_eq!(again.mask, pred.mask);
            assert_eq!(again.rollout, pred.rollout);
        }
    }

    #[test]
    fn invalid_sampling_is_rejected() {
        let mut cfg = tiny_config();
        cfg.sampling.max_len = 3;
        assert!(cfg.validate().is_err());
    }
}
