//! Transformer text encoder whose attention layers read trainable
//! per-layer prefix tokens, plus the word-level tokenizer.
//!
//! Activations are row-major `n x d` (one row per token). Every layer
//! computes queries from the `n` text rows only, while keys and values are
//! computed over the prefix rows followed by the text rows, so the layer
//! always emits exactly `n` rows. The pooled sequence embedding is the mean
//! of the last layer's text rows. A batch is encoded by stacking its
//! sequences row-wise; sequences share the prefix but never attend to each
//! other.

mod prefix;
pub mod tokenizer;

use std::ops::Range;

use rand::Rng;

use crate::numerics::{NodeId, ParamId, ParamStore, Tape, Tensor, TensorError};

pub use prefix::{materialize_prefix, LayerPrefix, PrefixBank, PrefixMode, Reparam};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of {len} tokens exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {0} outside the vocabulary")]
    UnknownToken(u32),
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tower {
    Query,
    Candidate,
}

impl Tower {
    pub fn name(self) -> &'static str {
        match self {
            Tower::Query => "query",
            Tower::Candidate => "candidate",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub prefix_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub reparam: Reparam,
    pub prefix_mode: PrefixMode,
    /// Feed-forward inner width as a multiple of `width`.
    pub ffn_mult: usize,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            width: 64,
            heads: 4,
            prefix_len: 4,
            max_len: 128,
            vocab_size: 0,
            reparam: Reparam::Embedding,
            prefix_mode: PrefixMode::Hidden,
            ffn_mult: 4,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if self.layers == 0 || self.width == 0 || self.ffn_mult == 0 {
            return bad("layers, width and ffn_mult must be positive".into());
        }
        if let Reparam::Mlp { hidden } = self.reparam {
            if hidden == 0 {
                return bad("mlp reparameterisation needs a positive hidden width".into());
            }
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        self.width * self.ffn_mult
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ff1: ParamId,
    pub ff1_bias: ParamId,
    pub ff2: ParamId,
    pub ff2_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl LayerParams {
    pub fn all(&self) -> [ParamId; 16] {
        [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo, self.ln1_gain, self.ln1_bias,
            self.ff1, self.ff1_bias, self.ff2, self.ff2_bias, self.ln2_gain, self.ln2_bias,
        ]
    }
}

/// Backbone parameters shared by both towers.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub embedding_ln_gain: ParamId,
    pub embedding_ln_bias: ParamId,
    pub layers: Vec<LayerParams>,
}

impl EncoderWeights {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self, EncoderError> {
        cfg.validate()?;
        let (d, f, std) = (cfg.width, cfg.ffn_width(), cfg.init_std);
        let mut mat = |store: &mut ParamStore, name: String, r: usize, c: usize| store.register(name, Tensor::randn(r, c, std, rng), true);
        let token_embedding = mat(store, "encoder.embeddings.token".into(), cfg.vocab_size.max(1), d);
        let position_embedding = mat(store, "encoder.embeddings.position".into(), cfg.max_len, d);
        let embedding_ln_gain = store.register("encoder.embeddings.ln.gain", Tensor::full(1, d, 1.0), false);
        let embedding_ln_bias = store.register("encoder.embeddings.ln.bias", Tensor::zeros(1, d), false);
        let mut layers = Vec::with_capacity(cfg.layers);
        for j in 0..cfg.layers {
            let pre = format!("encoder.layer{j}");
            let zeros = |store: &mut ParamStore, name: &str, c: usize| store.register(format!("{pre}.{name}"), Tensor::zeros(1, c), false);
            let wq = mat(store, format!("{pre}.attn.wq"), d, d);
            let bq = zeros(store, "attn.bq", d);
            let wk = mat(store, format!("{pre}.attn.wk"), d, d);
            let bk = zeros(store, "attn.bk", d);
            let wv = mat(store, format!("{pre}.attn.wv"), d, d);
            let bv = zeros(store, "attn.bv", d);
            let wo = mat(store, format!("{pre}.attn.wo"), d, d);
            let bo = zeros(store, "attn.bo", d);
            let ln1_gain = store.register(format!("{pre}.ln1.gain"), Tensor::full(1, d, 1.0), false);
            let ln1_bias = zeros(store, "ln1.bias", d);
            let ff1 = mat(store, format!("{pre}.ffn.w1"), d, f);
            let ff1_bias = zeros(store, "ffn.b1", f);
            let ff2 = mat(store, format!("{pre}.ffn.w2"), f, d);
            let ff2_bias = zeros(store, "ffn.b2", d);
            let ln2_gain = store.register(format!("{pre}.ln2.gain"), Tensor::full(1, d, 1.0), false);
            let ln2_bias = zeros(store, "ln2.bias", d);
            layers.push(LayerParams {
                wq, bq, wk, bk, wv, bv, wo, bo, ln1_gain, ln1_bias, ff1, ff1_bias, ff2, ff2_bias, ln2_gain, ln2_bias,
            });
        }
        Ok(EncoderWeights { token_embedding, position_embedding, embedding_ln_gain, embedding_ln_bias, layers })
    }

    pub fn embedding_params(&self) -> [ParamId; 4] {
        [self.token_embedding, self.position_embedding, self.embedding_ln_gain, self.embedding_ln_bias]
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        let mut v = self.embedding_params().to_vec();
        for l in &self.layers {
            v.extend(l.all());
        }
        v
    }
}

/// Nodes recorded by one forward pass over a batch of sequences.
#[derive(Clone, Debug)]
pub struct EncodeTrace {
    /// `B x d`, row `i` the mean over sequence `i`'s final text rows.
    pub pooled: NodeId,
    /// Stacked `N x d` output of every layer, `N` the total token count.
    pub layer_outputs: Vec<NodeId>,
    /// Attention node of every layer (holds per-sequence, per-head probabilities).
    pub attention: Vec<NodeId>,
    /// Row range of each sequence in the stacked activations.
    pub segments: Vec<Range<usize>>,
}

fn linear(tape: &mut Tape, store: &ParamStore, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId, TensorError> {
    let w = tape.param(store, w);
    let b = tape.param(store, b);
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// One transformer block over stacked text rows `h` with an optional
/// prefix shared by every segment.
pub fn prefix_attention_layer(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &LayerParams,
    h: NodeId,
    prefix: &LayerPrefix,
    heads: usize,
    segments: &[Range<usize>],
) -> Result<(NodeId, NodeId), TensorError> {
    let q = linear(tape, store, h, layer.wq, layer.bq)?;
    let (k, v, shared) = match prefix {
        LayerPrefix::None => (linear(tape, store, h, layer.wk, layer.bk)?, linear(tape, store, h, layer.wv, layer.bv)?, 0),
        LayerPrefix::Hidden(p) => {
            let m = tape.value(*p).rows();
            let ht = tape.concat_rows(&[*p, h])?;
            (linear(tape, store, ht, layer.wk, layer.bk)?, linear(tape, store, ht, layer.wv, layer.bv)?, m)
        }
        LayerPrefix::KeyValue { keys, values } => {
            let m = tape.value(*keys).rows();
            let k = linear(tape, store, h, layer.wk, layer.bk)?;
            let v = linear(tape, store, h, layer.wv, layer.bv)?;
            (tape.concat_rows(&[*keys, k])?, tape.concat_rows(&[*values, v])?, m)
        }
    };
    let attn = tape.segmented_attention(q, k, v, heads, shared, segments)?;
    let o = linear(tape, store, attn, layer.wo, layer.bo)?;
    let r1 = tape.add(h, o)?;
    let (g1, b1) = (tape.param(store, layer.ln1_gain), tape.param(store, layer.ln1_bias));
    let h1 = tape.layer_norm(r1, g1, b1)?;
    let f = linear(tape, store, h1, layer.ff1, layer.ff1_bias)?;
    let f = tape.gelu(f);
    let f = linear(tape, store, f, layer.ff2, layer.ff2_bias)?;
    let r2 = tape.add(h1, f)?;
    let (g2, b2) = (tape.param(store, layer.ln2_gain), tape.param(store, layer.ln2_bias));
    Ok((tape.layer_norm(r2, g2, b2)?, attn))
}

/// Records a forward pass of every sequence in `batch` through the backbone
/// with the given tower's prefixes (`bank = None` runs the plain encoder).
/// Sequences never attend to each other.
pub fn encode_batch(
    tape: &mut Tape,
    store: &ParamStore,
    weights: &EncoderWeights,
    bank: Option<&PrefixBank>,
    cfg: &EncoderConfig,
    batch: &[&[u32]],
) -> Result<EncodeTrace, EncoderError> {
    if batch.is_empty() {
        return Err(EncoderError::EmptySequence);
    }
    let vocab = store.get(weights.token_embedding).value().rows();
    let mut idx = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(batch.len());
    for ids in batch {
        if ids.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        if ids.len() > cfg.max_len {
            return Err(EncoderError::TooLong { len: ids.len(), max: cfg.max_len });
        }
        let start = idx.len();
        for (pos, &i) in ids.iter().enumerate() {
            if i as usize >= vocab {
                return Err(EncoderError::UnknownToken(i));
            }
            idx.push(i as usize);
            positions.push(pos);
        }
        segments.push(start..idx.len());
    }

    let tok = tape.param(store, weights.token_embedding);
    let pos = tape.param(store, weights.position_embedding);
    let te = tape.gather_rows(tok, &idx)?;
    let pe = tape.gather_rows(pos, &positions)?;
    let x = tape.add(te, pe)?;
    let (g, b) = (tape.param(store, weights.embedding_ln_gain), tape.param(store, weights.embedding_ln_bias));
    let mut h = tape.layer_norm(x, g, b)?;

    let prefixes = match bank {
        Some(bank) if cfg.prefix_len > 0 => materialize_prefix(tape, store, bank, cfg)?,
        _ => vec![LayerPrefix::None; cfg.layers],
    };
    let mut layer_outputs = Vec::with_capacity(cfg.layers);
    let mut attention = Vec::with_capacity(cfg.layers);
    for (layer, prefix) in weights.layers.iter().zip(&prefixes) {
        let (out, attn) = prefix_attention_layer(tape, store, layer, h, prefix, cfg.heads, &segments)?;
        layer_outputs.push(out);
        attention.push(attn);
        h = out;
    }
    let pooled = tape.segment_mean_rows(h, &segments)?;
    Ok(EncodeTrace { pooled, layer_outputs, attention, segments })
}

/// Single-sequence form of [`encode_batch`]; `pooled` is `1 x d`.
pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    weights: &EncoderWeights,
    bank: Option<&PrefixBank>,
    cfg: &EncoderConfig,
    ids: &[u32],
) -> Result<EncodeTrace, EncoderError> {
    encode_batch(tape, store, weights, bank, cfg, &[ids])
}

/// Pooled embeddings (`B x d`) of a batch, no gradients kept.
pub fn embed_batch(
    store: &ParamStore,
    weights: &EncoderWeights,
    bank: Option<&PrefixBank>,
    cfg: &EncoderConfig,
    batch: &[&[u32]],
) -> Result<Tensor, EncoderError> {
    let mut tape = Tape::new();
    let trace = encode_batch(&mut tape, store, weights, bank, cfg, batch)?;
    Ok(tape.value(trace.pooled).clone())
}

pub fn embed(
    store: &ParamStore,
    weights: &EncoderWeights,
    bank: Option<&PrefixBank>,
    cfg: &EncoderConfig,
    ids: &[u32],
) -> Result<Tensor, EncoderError> {
    embed_batch(store, weights, bank, cfg, &[ids])
}
