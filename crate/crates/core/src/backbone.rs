//! Backbone interfaces and a small built-in encoder-decoder transformer.
//!
//! [`Seq2SeqBackbone`] exposes the hook points adapters need: every forward
//! pass receives a [`Hooks`] value that may prepend prompt vectors to the
//! encoder input, prepend key/value prefixes at any self-attention site, or add
//! a low-rank delta to the query/value projections of a self-attention site.
//! Self-attention sites are numbered encoder layers first, then decoder layers.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Mat, Var};
use crate::vocab::{BOS_ID, EOS_ID, PAD_ID};

const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Value,
}

/// Adapter contributions bound into one graph.
#[derive(Debug, Clone, Default)]
pub struct Hooks {
    /// `P × d_model` vectors prepended to the encoder input.
    pub prompt: Option<Var>,
    /// Per self-attention site: (`P × d_model` keys, `P × d_model` values).
    pub prefix: HashMap<usize, (Var, Var)>,
    /// Per (site, projection): (`A`: `r × d_in`, `B`: `d_out × r`), delta = `B·A`.
    pub lora: HashMap<(usize, Projection), (Var, Var)>,
    /// Dropout on the low-rank branch input; only active in training contexts.
    pub lora_dropout: f64,
}

/// Per-call forward options.
pub struct ForwardCtx<'a> {
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl ForwardCtx<'_> {
    pub fn eval() -> Self {
        ForwardCtx {
            dropout: 0.0,
            rng: None,
        }
    }
}

impl<'a> ForwardCtx<'a> {
    pub fn train(dropout: f64, rng: &'a mut ChaCha8Rng) -> Self {
        ForwardCtx {
            dropout,
            rng: Some(rng),
        }
    }

    fn apply_dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        self.dropout_at(g, x, self.dropout)
    }

    fn dropout_at(&mut self, g: &mut Graph, x: Var, p: f64) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else { return x };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask = Mat::from_shape_fn(g.shape(x), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        g.mul_const(x, mask)
    }
}

/// A conditional sequence-to-sequence model with adapter hook points.
pub trait Seq2SeqBackbone: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn d_model(&self) -> usize;
    fn heads(&self) -> usize;
    fn encoder_layers(&self) -> usize;
    fn decoder_layers(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    fn self_attention_sites(&self) -> usize {
        self.encoder_layers() + self.decoder_layers()
    }

    /// `(d_in, d_out)` of a projection at a self-attention site.
    fn projection_dims(&self, _site: usize, _proj: Projection) -> (usize, usize) {
        (self.d_model(), self.d_model())
    }

    /// Memory (`L' × d_model`) for a source sequence; `bound` indexes `params()`.
    fn encode(
        &self,
        g: &mut Graph,
        bound: &[Var],
        src: &[usize],
        hooks: &Hooks,
        ctx: &mut ForwardCtx,
    ) -> Result<Var>;

    /// Next-token logits (`T × vocab`) for decoder inputs under teacher forcing.
    fn decode(
        &self,
        g: &mut Graph,
        bound: &[Var],
        memory: Var,
        tgt_in: &[usize],
        hooks: &Hooks,
        ctx: &mut ForwardCtx,
    ) -> Result<Var>;
}

/// Produces per-token embeddings of width D.
pub trait SentenceEncoder: Send + Sync {
    fn width(&self) -> usize;
    fn dropout(&self) -> f64;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn max_seq_len(&self) -> usize;
    fn embed(&self, g: &mut Graph, bound: &[Var], ids: &[usize], ctx: &mut ForwardCtx) -> Result<Var>;
}

/// Bind every tensor of `store` into `g`, trainable or frozen.
pub fn bind_params(g: &mut Graph, store: &ParamStore, trainable: bool) -> Vec<Var> {
    store
        .iter()
        .map(|(_, t)| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Teacher-forced likelihood and decoding

fn check_len(len: usize, max: usize) -> Result<()> {
    if len == 0 || len > max {
        return Err(Error::Length { len, max });
    }
    Ok(())
}

/// Decoder input and gold output for a target: `<bos> t…` → `t… <eos>`.
pub fn teacher_forcing_pair(target: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(target.len() + 1);
    input.push(BOS_ID);
    input.extend_from_slice(target);
    let mut gold = target.to_vec();
    gold.push(EOS_ID);
    (input, gold)
}

/// Mean per-token cross-entropy of `target` (plus end-of-sequence) given `source`, in-graph.
pub fn nll_graph(
    bb: &dyn Seq2SeqBackbone,
    g: &mut Graph,
    bound: &[Var],
    hooks: &Hooks,
    source: &[usize],
    target: &[usize],
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    check_len(source.len(), bb.max_seq_len())?;
    check_len(target.len(), bb.max_seq_len().saturating_sub(1))?;
    let memory = bb.encode(g, bound, source, hooks, ctx)?;
    let (input, gold) = teacher_forcing_pair(target);
    let logits = bb.decode(g, bound, memory, &input, hooks, ctx)?;
    Ok(g.cross_entropy(logits, &gold))
}

/// Teacher-forced NLL of an unadapted backbone.
pub fn nll_loss(bb: &dyn Seq2SeqBackbone, source: &[usize], target: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, bb.params(), false);
    let loss = nll_graph(
        bb,
        &mut g,
        &bound,
        &Hooks::default(),
        source,
        target,
        &mut ForwardCtx::eval(),
    )?;
    Ok(g.scalar(loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    TopK { k: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    #[serde(flatten)]
    pub strategy: DecodeStrategy,
    /// Maximum generated tokens, excluding end-of-sequence.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: DecodeStrategy::Greedy,
            max_len: 24,
        }
    }
}

impl DecodeConfig {
    pub fn top_k(k: usize, seed: u64) -> Self {
        Self {
            strategy: DecodeStrategy::TopK { k, seed },
            ..Self::default()
        }
    }
}

/// Generated tokens plus whether decoding stopped at the length limit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

/// Autoregressive decoding; `bind` supplies parameters and hooks for a fresh graph.
pub fn generate_with(
    bb: &dyn Seq2SeqBackbone,
    bind: &dyn Fn(&mut Graph) -> (Vec<Var>, Hooks),
    source: &[usize],
    decode: &DecodeConfig,
) -> Result<Generation> {
    check_len(source.len(), bb.max_seq_len())?;
    let max_len = decode.max_len.min(bb.max_seq_len() - 1);
    let mut g = Graph::new();
    let (bound, hooks) = bind(&mut g);
    let mut ctx = ForwardCtx::eval();
    let memory = bb.encode(&mut g, &bound, source, &hooks, &mut ctx)?;
    let mut rng = match decode.strategy {
        DecodeStrategy::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        DecodeStrategy::Greedy => None,
    };
    let mut out = vec![BOS_ID];
    loop {
        if out.len() > max_len {
            return Ok(Generation {
                ids: out[1..].to_vec(),
                truncated: true,
            });
        }
        let logits = bb.decode(&mut g, &bound, memory, &out, &hooks, &mut ctx)?;
        let lv = g.value(logits);
        let mut last: Vec<f64> = lv.row(lv.nrows() - 1).to_vec();
        last[PAD_ID] = f64::NEG_INFINITY;
        last[BOS_ID] = f64::NEG_INFINITY;
        let next = match (&decode.strategy, rng.as_mut()) {
            (DecodeStrategy::TopK { k, .. }, Some(rng)) => sample_top_k(&last, *k, rng),
            _ => argmax(&last),
        };
        if next == EOS_ID {
            return Ok(Generation {
                ids: out[1..].to_vec(),
                truncated: false,
            });
        }
        out.push(next);
    }
}

pub fn generate(bb: &dyn Seq2SeqBackbone, source: &[usize], decode: &DecodeConfig) -> Result<Generation> {
    generate_with(
        bb,
        &|g| (bind_params(g, bb.params(), false), Hooks::default()),
        source,
        decode,
    )
}

/// First index of the maximum (ties resolve to the lowest id).
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_top_k(logits: &[f64], k: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k.max(1));
    let max = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| (logits[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in order.iter().zip(&weights) {
        if u < *w {
            return *i;
        }
        u -= w;
    }
    *order.last().unwrap()
}

// ---------------------------------------------------------------------------
// Tiny transformer

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyTransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_width: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl TinyTransformerConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_width: 128,
            max_seq_len: 64,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("ff_width", self.ff_width),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Closed-form size of the full encoder-decoder inventory.
    pub fn parameter_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.ff_width, self.vocab_size);
        let ff = d * f + f + f * d + d;
        let enc_layer = 2 * d + 4 * d * d + 2 * d + ff;
        let dec_layer = 2 * d + 4 * d * d + 2 * d + 4 * d * d + 2 * d + ff;
        v * d + self.encoder_layers * enc_layer + 2 * d + self.decoder_layers * dec_layer + 2 * d + d * v + v
    }

    /// Closed-form size of the encoder-only inventory.
    pub fn encoder_parameter_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.ff_width, self.vocab_size);
        let ff = d * f + f + f * d + d;
        v * d + self.encoder_layers * (4 * d + 4 * d * d + ff) + 2 * d
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross_attn: Attn,
    ln3: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Option<Norm>,
    lm_head: Option<(usize, usize)>,
}

/// Pre-norm encoder-decoder transformer with sinusoidal positions and an
/// untied output projection.
#[derive(Debug, Clone)]
pub struct TinyTransformer {
    cfg: TinyTransformerConfig,
    params: ParamStore,
    layout: Layout,
    positions: Mat,
    dropout: f64,
}

struct Init<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> Result<usize> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let m = Mat::from_shape_fn((rows, cols), |_| dist.sample(&mut *self.rng));
        self.store.insert(name, m)
    }

    fn filled(&mut self, name: String, rows: usize, cols: usize, v: f64) -> Result<usize> {
        self.store.insert(name, Mat::from_elem((rows, cols), v))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: self.filled(format!("{prefix}.gamma"), 1, d, 1.0)?,
            beta: self.filled(format!("{prefix}.beta"), 1, d, 0.0)?,
        })
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<Attn> {
        let std = 1.0 / (d as f64).sqrt();
        Ok(Attn {
            q: self.normal(format!("{prefix}.q"), d, d, std)?,
            k: self.normal(format!("{prefix}.k"), d, d, std)?,
            v: self.normal(format!("{prefix}.v"), d, d, std)?,
            o: self.normal(format!("{prefix}.o"), d, d, std)?,
        })
    }

    fn ff(&mut self, prefix: &str, d: usize, f: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            w1: self.normal(format!("{prefix}.w1"), d, f, 1.0 / (d as f64).sqrt())?,
            b1: self.filled(format!("{prefix}.b1"), 1, f, 0.0)?,
            w2: self.normal(format!("{prefix}.w2"), f, d, 1.0 / (f as f64).sqrt())?,
            b2: self.filled(format!("{prefix}.b2"), 1, d, 0.0)?,
        })
    }
}

fn sinusoidal(len: usize, d: usize) -> Mat {
    Mat::from_shape_fn((len, d), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = pos as f64 * rate;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

impl TinyTransformer {
    /// Full encoder-decoder with randomly initialised weights.
    pub fn new(cfg: TinyTransformerConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, true)
    }

    /// Encoder half only, used as a sentence encoder.
    pub fn new_encoder(cfg: TinyTransformerConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, false)
    }

    fn build(cfg: TinyTransformerConfig, seed: u64, with_decoder: bool) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let (d, f) = (cfg.d_model, cfg.ff_width);
        let embed = init.normal("embed".into(), cfg.vocab_size, d, 1.0)?;
        let mut encoder = Vec::new();
        for i in 0..cfg.encoder_layers {
            let p = format!("encoder.{i}");
            encoder.push(EncoderLayer {
                ln1: init.norm(&format!("{p}.ln1"), d)?,
                attn: init.attn(&format!("{p}.self_attn"), d)?,
                ln2: init.norm(&format!("{p}.ln2"), d)?,
                ff: init.ff(&format!("{p}.ff"), d, f)?,
            });
        }
        let encoder_norm = init.norm("encoder.final_norm", d)?;
        let mut decoder = Vec::new();
        let mut decoder_norm = None;
        let mut lm_head = None;
        if with_decoder {
            for i in 0..cfg.decoder_layers {
                let p = format!("decoder.{i}");
                decoder.push(DecoderLayer {
                    ln1: init.norm(&format!("{p}.ln1"), d)?,
                    self_attn: init.attn(&format!("{p}.self_attn"), d)?,
                    ln2: init.norm(&format!("{p}.ln2"), d)?,
                    cross_attn: init.attn(&format!("{p}.cross_attn"), d)?,
                    ln3: init.norm(&format!("{p}.ln3"), d)?,
                    ff: init.ff(&format!("{p}.ff"), d, f)?,
                });
            }
            decoder_norm = Some(init.norm("decoder.final_norm", d)?);
            lm_head = Some((
                init.normal("lm_head.weight".into(), d, cfg.vocab_size, 1.0 / (d as f64).sqrt())?,
                init.filled("lm_head.bias".into(), 1, cfg.vocab_size, 0.0)?,
            ));
        }
        let params = init.store;
        Ok(Self {
            cfg,
            params,
            layout: Layout {
                embed,
                encoder,
                encoder_norm,
                decoder,
                decoder_norm,
                lm_head,
            },
            positions: sinusoidal(cfg.max_seq_len + 1, d),
            dropout: 0.0,
        })
    }

    pub fn with_dropout(mut self, dropout: f64) -> Self {
        self.dropout = dropout;
        self
    }

    pub fn config(&self) -> &TinyTransformerConfig {
        &self.cfg
    }

    pub fn has_decoder(&self) -> bool {
        self.layout.lm_head.is_some()
    }

    fn embed_tokens(&self, g: &mut Graph, bound: &[Var], ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::argument(format!("token id {bad} outside vocabulary")));
        }
        let x = g.gather(bound[self.layout.embed], ids);
        let pos = self.positions.slice(ndarray::s![..ids.len(), ..]).to_owned();
        Ok(g.add_const(x, &pos))
    }

    fn norm(g: &mut Graph, bound: &[Var], n: Norm, x: Var) -> Var {
        g.layer_norm(x, bound[n.gamma], bound[n.beta])
    }

    fn project(
        g: &mut Graph,
        x: Var,
        w: Var,
        lora: Option<&(Var, Var)>,
        lora_dropout: f64,
        ctx: &mut ForwardCtx,
    ) -> Var {
        let base = g.matmul(x, w);
        match lora {
            Some(&(a, b)) => {
                let xd = ctx.dropout_at(g, x, lora_dropout);
                let down = g.matmul_t(xd, a);
                let up = g.matmul_t(down, b);
                g.add(base, up)
            }
            None => base,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        bound: &[Var],
        a: Attn,
        xq: Var,
        xkv: Var,
        site: Option<usize>,
        hooks: &Hooks,
        causal: bool,
        ctx: &mut ForwardCtx,
    ) -> Var {
        let lora = |p| site.and_then(|s| hooks.lora.get(&(s, p)));
        let ld = hooks.lora_dropout;
        let q = Self::project(g, xq, bound[a.q], lora(Projection::Query), ld, ctx);
        let mut k = g.matmul(xkv, bound[a.k]);
        let mut v = Self::project(g, xkv, bound[a.v], lora(Projection::Value), ld, ctx);
        let mut n_prefix = 0;
        if let Some(&(pk, pv)) = site.and_then(|s| hooks.prefix.get(&s)) {
            n_prefix = g.shape(pk).0;
            k = g.concat_rows(&[pk, k]);
            v = g.concat_rows(&[pv, v]);
        }
        let tq = g.shape(q).0;
        let tk = g.shape(k).0;
        let mask = causal.then(|| {
            Mat::from_shape_fn((tq, tk), |(i, j)| {
                if j >= n_prefix && j - n_prefix > i {
                    MASKED
                } else {
                    0.0
                }
            })
        });
        let dh = self.cfg.d_model / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let scores = g.matmul_t(qh, kh);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = &mask {
                scores = g.add_const(scores, m);
            }
            let att = g.softmax(scores);
            outs.push(g.matmul(att, vh));
        }
        let cat = g.concat_cols(&outs);
        g.matmul(cat, bound[a.o])
    }

    fn feed_forward(g: &mut Graph, bound: &[Var], f: FeedForward, x: Var) -> Var {
        let h = g.matmul(x, bound[f.w1]);
        let h = g.add_row(h, bound[f.b1]);
        let h = g.gelu(h);
        let h = g.matmul(h, bound[f.w2]);
        g.add_row(h, bound[f.b2])
    }

    fn run_encoder(
        &self,
        g: &mut Graph,
        bound: &[Var],
        src: &[usize],
        hooks: &Hooks,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let mut x = self.embed_tokens(g, bound, src)?;
        if let Some(p) = hooks.prompt {
            if g.shape(p).1 != self.cfg.d_model {
                return Err(Error::config("prompt width differs from d_model"));
            }
            x = g.concat_rows(&[p, x]);
        }
        x = ctx.apply_dropout(g, x);
        for (i, layer) in self.layout.encoder.iter().enumerate() {
            let h = Self::norm(g, bound, layer.ln1, x);
            let h = self.attention(g, bound, layer.attn, h, h, Some(i), hooks, false, ctx);
            let h = ctx.apply_dropout(g, h);
            x = g.add(x, h);
            let h = Self::norm(g, bound, layer.ln2, x);
            let h = Self::feed_forward(g, bound, layer.ff, h);
            let h = ctx.apply_dropout(g, h);
            x = g.add(x, h);
        }
        Ok(Self::norm(g, bound, self.layout.encoder_norm, x))
    }
}

impl Seq2SeqBackbone for TinyTransformer {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    fn heads(&self) -> usize {
        self.cfg.heads
    }

    fn encoder_layers(&self) -> usize {
        self.cfg.encoder_layers
    }

    fn decoder_layers(&self) -> usize {
        self.layout.decoder.len()
    }

    fn max_seq_len(&self) -> usize {
        self.cfg.max_seq_len
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn encode(
        &self,
        g: &mut Graph,
        bound: &[Var],
        src: &[usize],
        hooks: &Hooks,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        check_len(src.len(), self.cfg.max_seq_len)?;
        self.run_encoder(g, bound, src, hooks, ctx)
    }

    fn decode(
        &self,
        g: &mut Graph,
        bound: &[Var],
        memory: Var,
        tgt_in: &[usize],
        hooks: &Hooks,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let (Some(final_norm), Some((w, b))) = (self.layout.decoder_norm, self.layout.lm_head) else {
            return Err(Error::config("encoder-only model cannot decode"));
        };
        check_len(tgt_in.len(), self.cfg.max_seq_len)?;
        let enc = self.cfg.encoder_layers;
        let mut y = self.embed_tokens(g, bound, tgt_in)?;
        y = ctx.apply_dropout(g, y);
        for (j, layer) in self.layout.decoder.iter().enumerate() {
            let h = Self::norm(g, bound, layer.ln1, y);
            let h = self.attention(g, bound, layer.self_attn, h, h, Some(enc + j), hooks, true, ctx);
            let h = ctx.apply_dropout(g, h);
            y = g.add(y, h);
            let h = Self::norm(g, bound, layer.ln2, y);
            let h = self.attention(g, bound, layer.cross_attn, h, memory, None, hooks, false, ctx);
            let h = ctx.apply_dropout(g, h);
            y = g.add(y, h);
            let h = Self::norm(g, bound, layer.ln3, y);
            let h = Self::feed_forward(g, bound, layer.ff, h);
            let h = ctx.apply_dropout(g, h);
            y = g.add(y, h);
        }
        let y = Self::norm(g, bound, final_norm, y);
        let logits = g.matmul(y, bound[w]);
        Ok(g.add_row(logits, bound[b]))
    }
}

impl SentenceEncoder for TinyTransformer {
    fn width(&self) -> usize {
        self.cfg.d_model
    }

    fn dropout(&self) -> f64 {
        self.dropout
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn max_seq_len(&self) -> usize {
        self.cfg.max_seq_len
    }

    fn embed(&self, g: &mut Graph, bound: &[Var], ids: &[usize], ctx: &mut ForwardCtx) -> Result<Var> {
        check_len(ids.len(), self.cfg.max_seq_len)?;
        self.run_encoder(g, bound, ids, &Hooks::default(), ctx)
    }
}
