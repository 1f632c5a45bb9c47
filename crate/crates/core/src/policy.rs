//! Compact decoder-only transformer that reads an image embedding and an
//! instruction, then writes a think block followed by the concentration token.
//!
//! Sequence layout: `[IMG] instruction... y_0 y_1 ...`. The image embedding
//! occupies position 0. The log-probability of `y_j` comes from the output
//! at the position just before it, and the hidden state of `y_j` is the final
//! layer-normed activation at the position where `y_j` is fed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvStack, LayerNorm, Linear, Mlp};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{gemm, log_softmax_in_place, softmax_in_place, Tensor};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const THINK_OPEN: usize = 2;
pub const THINK_CLOSE: usize = 3;
pub const REF_POS: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<eos>", "<think>", "</think>", "<REF_POS>"];

/// Ordinary words understood by the standard vocabulary.
pub const WORDS: [&str; 18] = [
    "the", "shape", "largest", "smallest", "left", "right", "above", "below", "of", "red", "green",
    "blue", "yellow", "purple", "orange", "square", "circle", "triangle",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn standard() -> Self {
        Self { tokens: SPECIALS.iter().chain(WORDS.iter()).map(|s| s.to_string()).collect() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Whitespace-separated words to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::InvalidInput(format!("unknown word {w:?}"))))
            .collect()
    }

    /// Ids to text: specials are written verbatim, words are separated by a
    /// single space, padding is skipped and decoding stops at end-of-sequence.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut prev_word = false;
        for &id in ids {
            match id {
                EOS => break,
                PAD => continue,
                _ if Self::is_special(id) => {
                    out.push_str(self.token(id));
                    prev_word = false;
                }
                _ => {
                    if prev_word {
                        out.push(' ');
                    }
                    out.push_str(self.token(id));
                    prev_word = true;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub image_channels: Vec<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_positions: 32,
            image_channels: vec![8, 16, 32],
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig("d_model must be a positive multiple of n_heads".into()));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_positions < 2 || self.image_channels.is_empty() {
            return Err(Error::InvalidConfig("policy dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { temperature: 1.0, top_p: 1.0, max_len: 10 }
    }
}

/// One generated response.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<usize>,
    /// Untempered log-probabilities of `tokens` under the generating policy.
    pub logprobs: Vec<f64>,
    /// `[tokens.len(), d_model]` final hidden states.
    pub hidden: Tensor,
    pub concentration: Option<usize>,
    pub text: String,
}

/// Index of the first concentration token.
pub fn concentration_index(tokens: &[usize]) -> Option<usize> {
    tokens.iter().position(|&t| t == REF_POS)
}

/// Hidden state at the first concentration token.
pub fn extract_concentration(rollout: &Rollout) -> Result<Vec<f64>> {
    let k = concentration_index(&rollout.tokens).ok_or(Error::AbsentToken)?;
    Ok(rollout.hidden.row(k).to_vec())
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ff: Mlp,
}

/// Parameter layout of the policy. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Policy {
    pub cfg: PolicyConfig,
    pub vocab_size: usize,
    image_enc: ConvStack,
    image_proj: Linear,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

/// Per-layer key/value cache for incremental decoding.
struct KvCache {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    len: usize,
}

/// Differentiable outputs for a scored sequence.
pub struct SequenceOutput {
    /// `[n]` log-probabilities of the scored tokens.
    pub logprobs: Var,
    /// `[n, d_model]` hidden states of the scored tokens.
    pub hidden: Var,
}

impl Policy {
    pub fn new(cfg: PolicyConfig, vocab_size: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let grp = ParamGroup::Policy;
        let d = cfg.d_model;
        let mut layers = Vec::new();
        let mut c_in = 3;
        for (i, &c) in cfg.image_channels.iter().enumerate() {
            layers.push(Conv::new(store, &format!("policy.img.conv{i}"), grp, c_in, c, 3, 2, 1.4, rng));
            c_in = c;
        }
        let image_proj = Linear::scaled(store, "policy.img.proj", grp, c_in, d, 1.0, rng);
        let tok_emb = store.add_normal("policy.tok_emb", grp, &[vocab_size, d], 0.5, rng);
        let pos_emb = store.add_normal("policy.pos_emb", grp, &[cfg.max_positions, d], 0.1, rng);
        let out_gain = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("policy.block{l}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), grp, d),
                    wq: Linear::new(store, &format!("{p}.wq"), grp, d, d, 1.0 / (d as f64).sqrt(), false, rng),
                    wk: Linear::new(store, &format!("{p}.wk"), grp, d, d, 1.0 / (d as f64).sqrt(), false, rng),
                    wv: Linear::new(store, &format!("{p}.wv"), grp, d, d, 1.0 / (d as f64).sqrt(), false, rng),
                    wo: Linear::scaled(store, &format!("{p}.wo"), grp, d, d, out_gain, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), grp, d),
                    ff: Mlp {
                        fc1: Linear::scaled(store, &format!("{p}.ff1"), grp, d, cfg.d_ff, 1.0, rng),
                        fc2: Linear::scaled(store, &format!("{p}.ff2"), grp, cfg.d_ff, d, out_gain, rng),
                    },
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, "policy.ln_f", grp, d);
        // zero head: a fresh policy is uniform over the vocabulary
        let head = Linear::new(store, "policy.head", grp, d, vocab_size, 0.0, true, rng);
        Ok(Self { cfg, vocab_size, image_enc: ConvStack { layers }, image_proj, tok_emb, pos_emb, blocks, ln_f, head })
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.vocab_size) {
            Some(t) => Err(Error::InvalidInput(format!("token id {t} outside vocabulary of {}", self.vocab_size))),
            None => Ok(()),
        }
    }

    fn check_length(&self, total: usize) -> Result<()> {
        if total > self.cfg.max_positions {
            return Err(Error::InvalidInput(format!(
                "sequence of {total} positions exceeds the limit of {}",
                self.cfg.max_positions
            )));
        }
        Ok(())
    }

    // ---- image conditioning ----

    pub fn image_embedding(&self, g: &mut Graph, store: &ParamStore, image: &Tensor) -> Var {
        let x = g.constant(image.clone());
        let f = self.image_enc.forward(g, store, x);
        let (c, h, w) = g.value(f).dims3();
        let flat = g.reshape(f, &[c, h * w]);
        let avg = g.constant(Tensor::full(&[h * w, 1], 1.0 / (h * w) as f64));
        let pooled = g.matmul(flat, avg);
        let row = g.reshape(pooled, &[1, c]);
        self.image_proj.forward(g, store, row)
    }

    pub fn image_embedding_plain(&self, store: &ParamStore, image: &Tensor) -> Vec<f64> {
        let f = self.image_enc.apply(store, image);
        let (c, h, w) = f.dims3();
        let pooled: Vec<f64> =
            (0..c).map(|ch| f.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
        self.image_proj.apply(store, &pooled)
    }

    // ---- differentiable scoring ----

    /// Records the full forward pass over `[IMG] instr tokens` and returns the
    /// log-probabilities and hidden states of `tokens`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image_emb: Var,
        instr: &[usize],
        tokens: &[usize],
    ) -> Result<SequenceOutput> {
        self.check_tokens(instr)?;
        self.check_tokens(tokens)?;
        let (l, n) = (instr.len(), tokens.len());
        if n == 0 {
            return Err(Error::InvalidInput("cannot score an empty sequence".into()));
        }
        let total = 1 + l + n;
        self.check_length(total)?;
        let ids: Vec<usize> = instr.iter().chain(tokens).copied().collect();
        let table = g.param(store, self.tok_emb);
        let emb = g.embedding(table, &ids);
        let x = g.concat0(&[image_emb, emb]);
        let pos = g.param(store, self.pos_emb);
        let pos = g.slice_rows(pos, 0, total);
        let mut x = g.add(x, pos);
        for b in &self.blocks {
            let h = b.ln1.forward(g, store, x);
            let q = b.wq.forward(g, store, h);
            let k = b.wk.forward(g, store, h);
            let v = b.wv.forward(g, store, h);
            let a = g.attention(q, k, v, self.cfg.n_heads, true);
            let o = b.wo.forward(g, store, a);
            x = g.add(x, o);
            let h = b.ln2.forward(g, store, x);
            let f = b.ff.forward(g, store, h);
            x = g.add(x, f);
        }
        let hf = self.ln_f.forward(g, store, x);
        let p0 = 1 + l;
        let pre = g.slice_rows(hf, p0 - 1, n);
        let logits = self.head.forward(g, store, pre);
        let ls = g.log_softmax_rows(logits);
        let logprobs = g.gather_cols(ls, tokens);
        let hidden = g.slice_rows(hf, p0, n);
        Ok(SequenceOutput { logprobs, hidden })
    }

    // ---- plain incremental decoding ----

    fn new_cache(&self) -> KvCache {
        KvCache { k: vec![Vec::new(); self.blocks.len()], v: vec![Vec::new(); self.blocks.len()], len: 0 }
    }

    /// Feeds one input vector (embedding plus position) and returns the final
    /// hidden state at that position.
    fn step(&self, store: &ParamStore, cache: &mut KvCache, mut x: Vec<f64>) -> Vec<f64> {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = cache.len + 1;
        for (li, b) in self.blocks.iter().enumerate() {
            let h = b.ln1.apply(store, &x);
            let q = b.wq.apply(store, &h);
            cache.k[li].extend(b.wk.apply(store, &h));
            cache.v[li].extend(b.wv.apply(store, &h));
            let (ks, vs) = (&cache.k[li], &cache.v[li]);
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; t];
            for hd in 0..heads {
                let qh = &q[hd * dh..(hd + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &ks[j * d + hd * dh..j * d + (hd + 1) * dh];
                    *s = scale * qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(&mut scores);
                let out = &mut att[hd * dh..(hd + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    for (o, vv) in out.iter_mut().zip(&vs[j * d + hd * dh..j * d + (hd + 1) * dh]) {
                        *o += p * vv;
                    }
                }
            }
            for (xi, oi) in x.iter_mut().zip(b.wo.apply(store, &att)) {
                *xi += oi;
            }
            let h = b.ln2.apply(store, &x);
            for (xi, fi) in x.iter_mut().zip(b.ff.apply(store, &h)) {
                *xi += fi;
            }
        }
        cache.len = t;
        self.ln_f.apply(store, &x)
    }

    fn token_input(&self, store: &ParamStore, token: usize, pos: usize) -> Vec<f64> {
        let d = self.cfg.d_model;
        let e = &store.get(self.tok_emb).data()[token * d..(token + 1) * d];
        let p = &store.get(self.pos_emb).data()[pos * d..(pos + 1) * d];
        e.iter().zip(p).map(|(a, b)| a + b).collect()
    }

    fn log_probs(&self, store: &ParamStore, hidden: &[f64]) -> Vec<f64> {
        let mut logits = store.get(self.head.b.expect("head has a bias")).data().to_vec();
        gemm(1, self.cfg.d_model, self.vocab_size, 1.0, hidden, false, store.get(self.head.w).data(), false, 1.0, &mut logits);
        log_softmax_in_place(&mut logits);
        logits
    }

    /// Runs the image and instruction through a fresh cache.
    fn prefill(&self, store: &ParamStore, image_emb: &[f64], instr: &[usize]) -> (KvCache, Vec<f64>) {
        let d = self.cfg.d_model;
        let mut cache = self.new_cache();
        let pos0 = &store.get(self.pos_emb).data()[..d];
        let x: Vec<f64> = image_emb.iter().zip(pos0).map(|(a, b)| a + b).collect();
        let mut last = self.step(store, &mut cache, x);
        for (i, &t) in instr.iter().enumerate() {
            last = self.step(store, &mut cache, self.token_input(store, t, i + 1));
        }
        (cache, last)
    }

    fn decode(
        &self,
        store: &ParamStore,
        vocab: &Vocabulary,
        image_emb: &[f64],
        instr: &[usize],
        max_len: usize,
        mut choose: impl FnMut(&[f64]) -> usize,
    ) -> Result<Rollout> {
        self.check_tokens(instr)?;
        if max_len == 0 {
            return Err(Error::InvalidInput("max_len must be positive".into()));
        }
        self.check_length(1 + instr.len() + max_len)?;
        let p0 = 1 + instr.len();
        let (mut cache, mut last) = self.prefill(store, image_emb, instr);
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut hidden = Vec::new();
        for j in 0..max_len {
            let lp = self.log_probs(store, &last);
            let t = choose(&lp);
            tokens.push(t);
            logprobs.push(lp[t]);
            last = self.step(store, &mut cache, self.token_input(store, t, p0 + j));
            hidden.extend_from_slice(&last);
            if t == EOS {
                break;
            }
        }
        let n = tokens.len();
        Ok(Rollout {
            concentration: concentration_index(&tokens),
            text: vocab.decode(&tokens),
            hidden: Tensor::new(&[n, self.cfg.d_model], hidden),
            logprobs,
            tokens,
        })
    }

    /// Samples a response with temperature and nucleus filtering.
    pub fn generate(
        &self,
        store: &ParamStore,
        vocab: &Vocabulary,
        image_emb: &[f64],
        instr: &[usize],
        sampling: &Sampling,
        rng: &mut impl Rng,
    ) -> Result<Rollout> {
        if !(sampling.temperature > 0.0) || !(sampling.top_p > 0.0 && sampling.top_p <= 1.0) {
            return Err(Error::InvalidInput("temperature must be positive and top_p in (0, 1]".into()));
        }
        let (temp, top_p) = (sampling.temperature, sampling.top_p);
        self.decode(store, vocab, image_emb, instr, sampling.max_len, |lp| sample_token(lp, temp, top_p, rng))
    }

    /// Argmax decoding.
    pub fn greedy_generate(
        &self,
        store: &ParamStore,
        vocab: &Vocabulary,
        image_emb: &[f64],
        instr: &[usize],
        max_len: usize,
    ) -> Result<Rollout> {
        self.decode(store, vocab, image_emb, instr, max_len, argmax)
    }

    /// Log-probabilities and hidden states of `tokens` by teacher forcing.
    pub fn score(
        &self,
        store: &ParamStore,
        image_emb: &[f64],
        instr: &[usize],
        tokens: &[usize],
    ) -> Result<(Vec<f64>, Tensor)> {
        self.check_tokens(instr)?;
        self.check_tokens(tokens)?;
        self.check_length(1 + instr.len() + tokens.len())?;
        let p0 = 1 + instr.len();
        let (mut cache, mut last) = self.prefill(store, image_emb, instr);
        let mut logprobs = Vec::with_capacity(tokens.len());
        let mut hidden = Vec::with_capacity(tokens.len() * self.cfg.d_model);
        for (j, &t) in tokens.iter().enumerate() {
            logprobs.push(self.log_probs(store, &last)[t]);
            last = self.step(store, &mut cache, self.token_input(store, t, p0 + j));
            hidden.extend_from_slice(&last);
        }
        Ok((logprobs, Tensor::new(&[tokens.len(), self.cfg.d_model], hidden)))
    }

    pub fn logprobs_under(
        &self,
        store: &ParamStore,
        image_emb: &[f64],
        instr: &[usize],
        tokens: &[usize],
    ) -> Result<Vec<f64>> {
        Ok(self.score(store, image_emb, instr, tokens)?.0)
    }

    /// Next-token log-probabilities after `prefix`, over the whole vocabulary.
    pub fn next_token_logprobs(
        &self,
        store: &ParamStore,
        image_emb: &[f64],
        instr: &[usize],
        prefix: &[usize],
    ) -> Result<Vec<f64>> {
        self.check_tokens(instr)?;
        self.check_tokens(prefix)?;
        self.check_length(1 + instr.len() + prefix.len())?;
        let p0 = 1 + instr.len();
        let (mut cache, mut last) = self.prefill(store, image_emb, instr);
        for (j, &t) in prefix.iter().enumerate() {
            last = self.step(store, &mut cache, self.token_input(store, t, p0 + j));
        }
        Ok(self.log_probs(store, &last))
    }
}

fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

fn sample_token(lp: &[f64], temperature: f64, top_p: f64, rng: &mut impl Rng) -> usize {
    let mut p: Vec<f64> = lp.iter().map(|v| v / temperature).collect();
    softmax_in_place(&mut p);
    let mut order: Vec<usize> = (0..p.len()).collect();
    if top_p < 1.0 {
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        let mut cum = 0.0;
        let mut keep = 0;
        for &i in &order {
            cum += p[i];
            keep += 1;
            if cum >= top_p {
                break;
            }
        }
        order.truncate(keep);
    }
    let mass: f64 = order.iter().map(|&i| p[i]).sum();
    let u = rng.gen::<f64>() * mass;
    let mut acc = 0.0;
    for &i in &order {
        acc += p[i];
        if u < acc {
            return i;
        }
    }
    *order.last().unwrap()
}
