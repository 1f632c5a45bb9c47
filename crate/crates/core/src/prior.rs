//! Positional prior: the concentration embedding becomes a query that is
//! scored against a grid of image keys head by head; a small convolutional
//! fuse turns the per-head maps into one logit heatmap.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvStack, LayerNorm, Linear, Mlp};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseActivation {
    Silu,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Side of the square working canvas the keys are computed from.
    pub canvas: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    /// Self-attention blocks over the feature grid after the convolutions.
    pub encoder_attention_layers: usize,
    pub encoder_heads: usize,
    pub d_k: usize,
    pub d_q: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub fuse_hidden: usize,
    pub fuse_activation: FuseActivation,
    /// Side of the prior heatmap.
    pub prior_res: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            canvas: 256,
            encoder_channels: vec![16, 24, 32, 32],
            encoder_strides: vec![2, 2, 2, 2],
            encoder_attention_layers: 1,
            encoder_heads: 4,
            d_k: 32,
            d_q: 64,
            n_heads: 8,
            d_head: 16,
            fuse_hidden: 8,
            fuse_activation: FuseActivation::Silu,
            prior_res: 64,
        }
    }
}

impl PriorConfig {
    /// Side of the key grid produced by the encoder.
    pub fn key_side(&self) -> usize {
        self.encoder_strides.iter().fold(self.canvas, |s, &st| s.div_ceil(st))
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() || self.encoder_channels.len() != self.encoder_strides.len() {
            return Err(Error::InvalidConfig("encoder channels and strides must pair up".into()));
        }
        if [self.canvas, self.d_k, self.d_q, self.n_heads, self.d_head, self.fuse_hidden, self.prior_res]
            .contains(&0)
            || self.encoder_strides.contains(&0)
        {
            return Err(Error::InvalidConfig("prior dimensions must be positive".into()));
        }
        let c = *self.encoder_channels.last().unwrap();
        if self.encoder_attention_layers > 0 && (self.encoder_heads == 0 || c % self.encoder_heads != 0) {
            return Err(Error::InvalidConfig("encoder heads must divide the last encoder width".into()));
        }
        if self.canvas % self.prior_res != 0 {
            return Err(Error::InvalidConfig("prior resolution must divide the canvas".into()));
        }
        Ok(())
    }
}

/// Pre-norm transformer block over the key grid.
#[derive(Clone, Debug)]
struct GridBlock {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
    heads: usize,
}

impl GridBlock {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Prior;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), g, d),
            wq: Linear::scaled(store, &format!("{name}.wq"), g, d, d, 1.0, rng),
            wk: Linear::scaled(store, &format!("{name}.wk"), g, d, d, 1.0, rng),
            wv: Linear::scaled(store, &format!("{name}.wv"), g, d, d, 1.0, rng),
            wo: Linear::scaled(store, &format!("{name}.wo"), g, d, d, 0.5, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), g, d),
            mlp: Mlp {
                fc1: Linear::scaled(store, &format!("{name}.mlp1"), g, d, 2 * d, 1.4, rng),
                fc2: Linear::scaled(store, &format!("{name}.mlp2"), g, 2 * d, d, 0.5, rng),
            },
            heads,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.ln1.forward(g, store, x);
        let q = self.wq.forward(g, store, h);
        let k = self.wk.forward(g, store, h);
        let v = self.wv.forward(g, store, h);
        let a = g.attention(q, k, v, self.heads, false);
        let o = self.wo.forward(g, store, a);
        let x = g.add(x, o);
        let h = self.ln2.forward(g, store, x);
        let f = self.mlp.forward(g, store, h);
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct Prior {
    pub cfg: PriorConfig,
    key_encoder: ConvStack,
    key_blocks: Vec<GridBlock>,
    key_mlp: Mlp,
    query_head: Mlp,
    fallback: ParamId,
    w_q: Linear,
    w_k: Linear,
    fuse1: Conv,
    fuse2: Conv,
}

/// Per-head score maps and the fused heatmap.
#[derive(Clone, Copy, Debug)]
pub struct PriorOutput {
    /// `[n_heads, key_side, key_side]`.
    pub scores: Var,
    /// `[1, prior_res, prior_res]` logits.
    pub prior: Var,
}

impl Prior {
    pub fn new(cfg: PriorConfig, d_model: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let pg = ParamGroup::Prior;
        let qg = ParamGroup::QueryHead;
        let mut layers = Vec::new();
        // RGB plus two coordinate channels
        let mut c_in = 5;
        for (i, (&c, &s)) in cfg.encoder_channels.iter().zip(&cfg.encoder_strides).enumerate() {
            layers.push(Conv::new(store, &format!("prior.keys.conv{i}"), pg, c_in, c, 3, s, 1.4, rng));
            c_in = c;
        }
        let key_blocks = (0..cfg.encoder_attention_layers)
            .map(|i| GridBlock::new(store, &format!("prior.keys.attn{i}"), c_in, cfg.encoder_heads, rng))
            .collect();
        let key_mlp = Mlp {
            fc1: Linear::scaled(store, "prior.keys.mlp1", pg, c_in, cfg.d_k, 1.4, rng),
            fc2: Linear::scaled(store, "prior.keys.mlp2", pg, cfg.d_k, cfg.d_k, 1.0, rng),
        };
        let query_head = Mlp {
            fc1: Linear::scaled(store, "query_head.fc1", qg, d_model, d_model, 1.4, rng),
            fc2: Linear::scaled(store, "query_head.fc2", qg, d_model, cfg.d_q, 1.0, rng),
        };
        let fallback = store.add_normal("query_head.fallback", qg, &[1, d_model], 1.0, rng);
        let inner = cfg.n_heads * cfg.d_head;
        let w_q = Linear::new(store, "prior.w_q", pg, cfg.d_q, inner, 1.0 / (cfg.d_q as f64).sqrt(), false, rng);
        let w_k = Linear::new(store, "prior.w_k", pg, cfg.d_k, inner, 1.0 / (cfg.d_k as f64).sqrt(), false, rng);
        let fuse1 = Conv::new(store, "prior.fuse1", pg, cfg.n_heads, cfg.fuse_hidden, 3, 1, 1.4, rng);
        let fuse2 = Conv::new(store, "prior.fuse2", pg, cfg.fuse_hidden, 1, 3, 1, 1.0, rng);
        Ok(Self { cfg, key_encoder: ConvStack { layers }, key_blocks, key_mlp, query_head, fallback, w_q, w_k, fuse1, fuse2 })
    }

    /// Adds normalized row/column coordinate channels to a `[3,S,S]` image.
    fn with_coords(&self, image: &Tensor) -> Tensor {
        let s = self.cfg.canvas;
        let mut data = image.data().to_vec();
        let coord = |i: usize| 2.0 * (i as f64 + 0.5) / s as f64 - 1.0;
        data.extend((0..s * s).map(|i| coord(i / s)));
        data.extend((0..s * s).map(|i| coord(i % s)));
        Tensor::new(&[5, s, s], data)
    }

    /// `[N, d_k]` keys over the `key_side × key_side` grid (row-major).
    pub fn encode_keys(&self, g: &mut Graph, store: &ParamStore, canvas_image: &Tensor) -> Result<Var> {
        let s = self.cfg.canvas;
        if canvas_image.shape() != [3, s, s] {
            return Err(Error::InvalidInput(format!(
                "key encoder expects [3, {s}, {s}], got {:?}",
                canvas_image.shape()
            )));
        }
        let x = g.constant(self.with_coords(canvas_image));
        let f = self.key_encoder.forward(g, store, x);
        let (c, h, w) = g.value(f).dims3();
        let flat = g.reshape(f, &[c, h * w]);
        let mut rows = g.transpose(flat);
        for b in &self.key_blocks {
            rows = b.forward(g, store, rows);
        }
        Ok(self.key_mlp.forward(g, store, rows))
    }

    /// `[1, d_q]` query from a `[1, d_model]` concentration embedding.
    pub fn project_query(&self, g: &mut Graph, store: &ParamStore, e_conc: Var) -> Var {
        self.query_head.forward(g, store, e_conc)
    }

    /// Learned stand-in used when a rollout has no concentration token.
    pub fn fallback_embedding(&self, g: &mut Graph, store: &ParamStore) -> Var {
        g.param(store, self.fallback)
    }

    /// `[n_heads, key_side, key_side]` maps of `(Q W^Q_h)·(K W^K_h) / sqrt(d_head)`.
    pub fn attention_scores(&self, g: &mut Graph, store: &ParamStore, query: Var, keys: Var) -> Var {
        let qp = self.w_q.forward(g, store, query);
        let kp = self.w_k.forward(g, store, keys);
        let scale = 1.0 / (self.cfg.d_head as f64).sqrt();
        let s = g.head_scores(kp, qp, self.cfg.n_heads, scale);
        let side = self.cfg.key_side();
        g.reshape(s, &[self.cfg.n_heads, side, side])
    }

    /// Two convolutions, then bilinear resampling to the prior resolution.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, scores: Var) -> Var {
        let h = self.fuse1.forward(g, store, scores);
        let h = match self.cfg.fuse_activation {
            FuseActivation::Silu => g.silu(h),
            FuseActivation::None => h,
        };
        let m = self.fuse2.forward(g, store, h);
        let r = self.cfg.prior_res;
        if self.cfg.key_side() == r {
            m
        } else {
            g.resize(m, r, r)
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, keys: Var, e_conc: Var) -> PriorOutput {
        let q = self.project_query(g, store, e_conc);
        let scores = self.attention_scores(g, store, q, keys);
        let prior = self.fuse(g, store, scores);
        PriorOutput { scores, prior }
    }

    pub fn w_q(&self) -> ParamId {
        self.w_q.w
    }

    pub fn w_k(&self) -> ParamId {
        self.w_k.w
    }

    pub fn fuse1_weight(&self) -> ParamId {
        self.fuse1.w
    }
}
