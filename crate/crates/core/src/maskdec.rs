//! Mask decoder conditioned on the positional prior.
//!
//! The prior heatmap is lifted to a feature map, then prior tokens and image
//! key tokens exchange information through alternating cross-attention before
//! the refined image tokens are upsampled and combined with the prior
//! features into one mask logit map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{invert_to_original, Mask, TransformRecord};
use crate::nn::{Conv, ConvStack, LayerNorm, Linear, Mlp};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::prior::PriorConfig;
use crate::tensor::{resize_bilinear, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Channels of the resampled prior features.
    pub prior_channels: usize,
    /// Width of the tokens exchanged in the two-way decoder.
    pub token_dim: usize,
    /// Side of the pooled prior token grid.
    pub prior_token_side: usize,
    pub rounds: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub out_hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { prior_channels: 8, token_dim: 16, prior_token_side: 8, rounds: 2, heads: 2, mlp_hidden: 32, out_hidden: 16 }
    }
}

impl DecoderConfig {
    pub fn validate(&self, prior: &PriorConfig) -> Result<()> {
        if [self.prior_channels, self.token_dim, self.prior_token_side, self.heads, self.mlp_hidden, self.out_hidden]
            .contains(&0)
        {
            return Err(Error::InvalidConfig("decoder dimensions must be positive".into()));
        }
        if self.token_dim % self.heads != 0 {
            return Err(Error::InvalidConfig("decoder token_dim must be divisible by heads".into()));
        }
        if prior.prior_res % self.prior_token_side != 0 {
            return Err(Error::InvalidConfig("prior token side must divide the prior resolution".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct CrossAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl CrossAttention {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Decoder;
        Self {
            wq: Linear::scaled(store, &format!("{name}.wq"), g, d, d, 1.0, rng),
            wk: Linear::scaled(store, &format!("{name}.wk"), g, d, d, 1.0, rng),
            wv: Linear::scaled(store, &format!("{name}.wv"), g, d, d, 1.0, rng),
            wo: Linear::scaled(store, &format!("{name}.wo"), g, d, d, 1.0, rng),
            heads,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, context: Var) -> Var {
        let q = self.wq.forward(g, store, queries);
        let k = self.wk.forward(g, store, context);
        let v = self.wv.forward(g, store, context);
        let a = g.attention(q, k, v, self.heads, false);
        self.wo.forward(g, store, a)
    }
}

#[derive(Clone, Debug)]
struct Round {
    prior_to_image: CrossAttention,
    ln1: LayerNorm,
    mlp: Mlp,
    ln2: LayerNorm,
    image_to_prior: CrossAttention,
    ln3: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub cfg: DecoderConfig,
    prior_res: usize,
    key_side: usize,
    resample: ConvStack,
    prior_proj: Linear,
    image_proj: Linear,
    prior_pos: ParamId,
    image_pos: ParamId,
    rounds: Vec<Round>,
    out1: Conv,
    out2: Conv,
}

impl MaskDecoder {
    pub fn new(cfg: DecoderConfig, prior: &PriorConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(prior)?;
        let g = ParamGroup::Decoder;
        let (c, d) = (cfg.prior_channels, cfg.token_dim);
        let resample = ConvStack {
            layers: vec![
                Conv::new(store, "decoder.resample0", g, 1, c, 3, 1, 1.4, rng),
                Conv::new(store, "decoder.resample1", g, c, c, 3, 1, 1.4, rng),
                Conv::new(store, "decoder.resample2", g, c, c, 3, 1, 1.4, rng),
            ],
        };
        let key_side = prior.key_side();
        let n_prior = cfg.prior_token_side * cfg.prior_token_side;
        let prior_proj = Linear::scaled(store, "decoder.prior_proj", g, c, d, 1.0, rng);
        let image_proj = Linear::scaled(store, "decoder.image_proj", g, prior.d_k, d, 1.0, rng);
        let prior_pos = store.add_normal("decoder.prior_pos", g, &[n_prior, d], 0.1, rng);
        let image_pos = store.add_normal("decoder.image_pos", g, &[key_side * key_side, d], 0.1, rng);
        let rounds = (0..cfg.rounds)
            .map(|r| {
                let n = format!("decoder.round{r}");
                Round {
                    prior_to_image: CrossAttention::new(store, &format!("{n}.p2i"), d, cfg.heads, rng),
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), g, d),
                    mlp: Mlp {
                        fc1: Linear::scaled(store, &format!("{n}.mlp1"), g, d, cfg.mlp_hidden, 1.4, rng),
                        fc2: Linear::scaled(store, &format!("{n}.mlp2"), g, cfg.mlp_hidden, d, 1.0, rng),
                    },
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), g, d),
                    image_to_prior: CrossAttention::new(store, &format!("{n}.i2p"), d, cfg.heads, rng),
                    ln3: LayerNorm::new(store, &format!("{n}.ln3"), g, d),
                }
            })
            .collect();
        let out1 = Conv::new(store, "decoder.out1", g, d + c, cfg.out_hidden, 1, 1, 1.4, rng);
        let out2 = Conv::new(store, "decoder.out2", g, cfg.out_hidden, 1, 3, 1, 1.0, rng);
        Ok(Self {
            cfg,
            prior_res: prior.prior_res,
            key_side,
            resample,
            prior_proj,
            image_proj,
            prior_pos,
            image_pos,
            rounds,
            out1,
            out2,
        })
    }

    /// `[1,R,R]` prior logits to `[prior_channels,R,R]` features.
    pub fn resample_prior(&self, g: &mut Graph, store: &ParamStore, prior: Var) -> Var {
        self.resample.forward(g, store, prior)
    }

    /// Runs the two-way exchange and produces `[1,R,R]` mask logits.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, keys: Var, features: Var) -> Var {
        let (c, r) = (self.cfg.prior_channels, self.prior_res);
        let side = self.cfg.prior_token_side;
        let pooled = g.avg_pool(features, r / side);
        let flat = g.reshape(pooled, &[c, side * side]);
        let rows = g.transpose(flat);
        let pt = self.prior_proj.forward(g, store, rows);
        let pp = g.param(store, self.prior_pos);
        let mut p = g.add(pt, pp);
        let it = self.image_proj.forward(g, store, keys);
        let ip = g.param(store, self.image_pos);
        let mut im = g.add(it, ip);
        for round in &self.rounds {
            let a = round.prior_to_image.forward(g, store, p, im);
            let s = g.add(p, a);
            p = round.ln1.forward(g, store, s);
            let m = round.mlp.forward(g, store, p);
            let s = g.add(p, m);
            p = round.ln2.forward(g, store, s);
            let a = round.image_to_prior.forward(g, store, im, p);
            let s = g.add(im, a);
            im = round.ln3.forward(g, store, s);
        }
        let d = self.cfg.token_dim;
        let t = g.transpose(im);
        let grid = g.reshape(t, &[d, self.key_side, self.key_side]);
        let up = if self.key_side == r { grid } else { g.resize(grid, r, r) };
        let cat = g.concat0(&[up, features]);
        let h = self.out1.forward(g, store, cat);
        let h = g.silu(h);
        self.out2.forward(g, store, h)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, keys: Var, prior: Var) -> Var {
        let f = self.resample_prior(g, store, prior);
        self.decode(g, store, keys, f)
    }
}

/// Bilinearly resamples `[1,R,R]` (or `[R,R]`) logits to the `S × S` canvas.
pub fn logits_to_canvas(logits: &Tensor, canvas: usize) -> Result<Tensor> {
    let t = match *logits.shape() {
        [1, h, w] | [h, w] if h == w => logits.clone().reshape(&[1, h, w]),
        _ => return Err(Error::InvalidInput(format!("expected square logits, got {:?}", logits.shape()))),
    };
    Ok(resize_bilinear(&t, canvas, canvas).reshape(&[canvas, canvas]))
}

/// Logits on the canvas mapped back to the original image, thresholded at zero.
pub fn binarize(logits: &Tensor, record: &TransformRecord) -> Result<Mask> {
    let canvas = logits_to_canvas(logits, record.canvas_size)?;
    let orig = invert_to_original(&canvas, record)?;
    Ok(Mask::from_logits(&orig))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::to_canvas;
    use crate::prior::tests::{jitter, small_config};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_decoder() -> DecoderConfig {
        DecoderConfig { prior_channels: 3, token_dim: 4, prior_token_side: 4, rounds: 2, heads: 2, mlp_hidden: 5, out_hidden: 3 }
    }

    fn build(seed: u64) -> (MaskDecoder, ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = MaskDecoder::new(small_decoder(), &small_config(), &mut store, &mut rng).unwrap();
        jitter(&mut store, &mut rng);
        (d, store, rng)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn shapes_and_validation() {
        let (d, store, mut rng) = build(0);
        let mut g = Graph::new();
        let keys = g.constant(random(&[16, 6], &mut rng));
        let prior = g.constant(random(&[1, 8, 8], &mut rng));
        let f = d.resample_prior(&mut g, &store, prior);
        assert_eq!(g.shape(f), &[3, 8, 8]);
        let m = d.decode(&mut g, &store, keys, f);
        assert_eq!(g.shape(m), &[1, 8, 8]);
        let bad = DecoderConfig { token_dim: 5, ..small_decoder() };
        assert!(bad.validate(&small_config()).is_err());
        let bad = DecoderConfig { prior_token_side: 3, ..small_decoder() };
        assert!(bad.validate(&small_config()).is_err());
    }

    #[test]
    fn zero_prior_with_zero_biases_gives_zero_features() {
        let (d, mut store, _) = build(1);
        for l in &d.resample.layers {
            store.get_mut(l.b).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let prior = g.constant(Tensor::zeros(&[1, 8, 8]));
        let f = d.resample_prior(&mut g, &store, prior);
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prior_conditions_the_mask() {
        let (d, store, mut rng) = build(2);
        let keys_t = random(&[16, 6], &mut rng);
        let run = |prior: Tensor| {
            let mut g = Graph::new();
            let k = g.constant(keys_t.clone());
            let p = g.constant(prior);
            let m = d.forward(&mut g, &store, k, p);
            g.value(m).clone()
        };
        let a = run(Tensor::from_fn(&[1, 8, 8], |i| if i % 8 < 4 { 3.0 } else { -3.0 }));
        let b = run(Tensor::from_fn(&[1, 8, 8], |i| if i % 8 < 4 { -3.0 } else { 3.0 }));
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-3);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (d, store, mut rng) = build(3);
        let keys_t = random(&[16, 6], &mut rng);
        let prior_t = random(&[1, 8, 8], &mut rng);
        let w = random(&[1, 8, 8], &mut rng);
        let loss = |s: &ParamStore, prior: &Tensor| {
            let mut g = Graph::new();
            let k = g.constant(keys_t.clone());
            let p = g.constant(prior.clone());
            let m = d.forward(&mut g, s, k, p);
            let wv = g.constant(w.clone());
            let t = g.tanh(m);
            let l = g.mul(t, wv);
            let l = g.sum(l);
            (g, l, p)
        };
        let (g, l, p) = loss(&store, &prior_t);
        let grads = g.backward(l);
        let gp = g.grad_of(l, p);
        let check = |fd: f64, ad: f64, what: &str| {
            let err = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-6);
            assert!(err < 1e-4 || (fd - ad).abs() < 1e-9, "{what}: fd {fd} ad {ad}");
        };
        for id in store.ids() {
            let j = rng.gen_range(0..store.get(id).len());
            let at = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[j] += delta;
                let (g, l, _) = loss(&s, &prior_t);
                g.value(l).item()
            };
            let fd = (at(1e-6) - at(-1e-6)) / 2e-6;
            check(fd, grads.get(id).map_or(0.0, |t| t.data()[j]), store.name(id));
        }
        for j in [0, 17, 63] {
            let at = |delta: f64| {
                let mut pt = prior_t.clone();
                pt.data_mut()[j] += delta;
                let (g, l, _) = loss(&store, &pt);
                g.value(l).item()
            };
            check((at(1e-6) - at(-1e-6)) / 2e-6, gp.data()[j], "prior input");
        }
    }

    #[test]
    fn binarize_matches_logit_sign() {
        // 20x10 image on a 16 canvas; logits positive on the left half of the valid area
        let img = Tensor::zeros(&[3, 20, 10]);
        let (_, rec) = to_canvas(&img, 16).unwrap();
        let logits = Tensor::from_fn(&[1, 16, 16], |i| if i % 16 < 4 { 5.0 } else { -5.0 });
        let m = binarize(&logits, &rec).unwrap();
        assert_eq!((m.height(), m.width()), (20, 10));
        for y in 0..20 {
            assert!(m.get(y, 0) && m.get(y, 1) && m.get(y, 2));
            assert!(!m.get(y, 5) && !m.get(y, 9));
        }
        let all = binarize(&Tensor::full(&[1, 8, 8], 1.0), &rec).unwrap();
        assert_eq!(all.count(), 200);
        let none = binarize(&Tensor::full(&[8, 8], -1.0), &rec).unwrap();
        assert_eq!(none.count(), 0);
        assert!(logits_to_canvas(&Tensor::zeros(&[2, 4, 4]), 16).is_err());
    }
}
