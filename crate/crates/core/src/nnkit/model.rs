//! Pre-norm decoder-only transformer.
//!
//! Token plus learned position embeddings, `n_layers` blocks of
//! RMSNorm -> causal multi-head attention -> residual, RMSNorm -> GELU
//! feed-forward (width 4d) -> residual, then a final RMSNorm, an output
//! projection and a softmax. No biases.
//!
//! Parameter order (also the checkpoint order):
//!
//! ```text
//! token_embedding  V x d
//! position_embedding  C x d
//! per layer: attn_norm 1 x d, wq d x d, wk d x d, wv d x d, wo d x d,
//!            ffn_norm 1 x d, w_in d x 4d, w_out 4d x d
//! final_norm  1 x d
//! output  d x V
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tape::{softmax_in_place, Matrix, Tape, Var};
use super::vocab::EOS_ID;

const INIT_STD: f64 = 0.02;
const PER_LAYER: usize = 8;
const MAGIC: &[u8; 4] = b"PPCL";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds context length {context}")]
    SequenceTooLong { len: usize, context: usize },
    #[error("empty input sequence")]
    EmptySequence,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {0} outside the vocabulary")]
    TokenOutOfRange(usize),
    #[error("checkpoint is malformed: {0}")]
    BadCheckpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Two layers, four heads, width 128, context 96.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            context_length: 96,
            embed_dim: 128,
            n_layers: 2,
            n_heads: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("context_length", self.context_length),
            ("embed_dim", self.embed_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// Shapes in parameter order.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let (v, c, d) = (self.vocab_size, self.context_length, self.embed_dim);
        let mut shapes = vec![(v, d), (c, d)];
        for _ in 0..self.n_layers {
            shapes.extend([(1, d), (d, d), (d, d), (d, d), (d, d), (1, d), (d, 4 * d), (4 * d, d)]);
        }
        shapes.extend([(1, d), (d, v)]);
        shapes
    }

    pub fn n_params(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }
}

struct LayerIdx {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ffn_norm: usize,
    w_in: usize,
    w_out: usize,
}

fn layer_idx(layer: usize) -> LayerIdx {
    let b = 2 + layer * PER_LAYER;
    LayerIdx {
        attn_norm: b,
        wq: b + 1,
        wk: b + 2,
        wv: b + 3,
        wo: b + 4,
        ffn_norm: b + 5,
        w_in: b + 6,
        w_out: b + 7,
    }
}

/// Rounds every entry to the nearest `f32`, so checkpoints are lossless.
pub fn snap_to_f32(m: &mut Matrix) {
    m.mapv_inplace(|x| x as f32 as f64);
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyLM {
    pub config: ModelConfig,
    pub params: Vec<Matrix>,
}

impl TinyLM {
    /// Seeded N(0, 0.02) weights, unit normalisation gains.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(r, c)| {
                if r == 1 {
                    Matrix::ones((r, c))
                } else {
                    let mut m = Matrix::from_shape_simple_fn((r, c), || normal.sample(&mut rng));
                    snap_to_f32(&mut m);
                    m
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn final_norm_idx(&self) -> usize {
        2 + self.config.n_layers * PER_LAYER
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if ids.len() > self.config.context_length {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                context: self.config.context_length,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange(bad));
        }
        Ok(())
    }

    /// Records the forward pass; returns the `T x V` distribution node.
    pub fn forward_tape<'a>(&self, tape: &mut Tape<'a>, ids: &[usize]) -> Result<Var, ModelError> {
        self.check_ids(ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.param(0);
        let pos = tape.param(1);
        let te = tape.gather(tok, ids);
        let pe = tape.gather(pos, &positions);
        let mut x = tape.add(te, pe);
        for layer in 0..self.config.n_layers {
            let li = layer_idx(layer);
            let g = tape.param(li.attn_norm);
            let h = tape.rms_norm(x, g);
            let (wq, wk, wv, wo) = (tape.param(li.wq), tape.param(li.wk), tape.param(li.wv), tape.param(li.wo));
            let q = tape.matmul(h, wq);
            let k = tape.matmul(h, wk);
            let v = tape.matmul(h, wv);
            let a = tape.causal_attention(q, k, v, self.config.n_heads);
            let proj = tape.matmul(a, wo);
            x = tape.add(x, proj);
            let g = tape.param(li.ffn_norm);
            let h = tape.rms_norm(x, g);
            let w_in = tape.param(li.w_in);
            let up = tape.matmul(h, w_in);
            let act = tape.gelu(up);
            let w_out = tape.param(li.w_out);
            let down = tape.matmul(act, w_out);
            x = tape.add(x, down);
        }
        let g = tape.param(self.final_norm_idx());
        let h = tape.rms_norm(x, g);
        let out = tape.param(self.final_norm_idx() + 1);
        let logits = tape.matmul(h, out);
        Ok(tape.softmax(logits))
    }

    /// Next-token distributions, one row per input position.
    pub fn forward(&self, ids: &[usize]) -> Result<Matrix, ModelError> {
        let mut tape = Tape::new(&self.params);
        let probs = self.forward_tape(&mut tape, ids)?;
        Ok(tape.value(probs).clone())
    }

    /// Greedy continuation of `prompt` until EOS, `max_new` tokens, or the
    /// context is full. Returns only the generated ids, EOS excluded.
    pub fn generate_greedy(&self, prompt: &[usize], max_new: usize) -> Result<Vec<usize>, ModelError> {
        self.check_ids(prompt)?;
        let mut dec = Decoder::new(self);
        let mut last = Vec::new();
        for &id in prompt {
            last = dec.step(id);
        }
        let mut out = Vec::new();
        while out.len() < max_new {
            let next = argmax(&last);
            if next == EOS_ID {
                break;
            }
            out.push(next);
            if dec.len() == self.config.context_length {
                break;
            }
            last = dec.step(next);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let io = |source| ModelError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::with_capacity(16 + 4 * self.config.n_params());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(&cfg);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            for &x in p.iter() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&buf).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| ModelError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::BadCheckpoint(m.to_string());
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8], ModelError> {
            if cur.len() < n {
                return Err(bad("truncated"));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let cfg_len = u32_at(take(4)?) as usize;
        let config: ModelConfig =
            serde_json::from_slice(take(cfg_len)?).map_err(|e| bad(&format!("config: {e}")))?;
        config.validate()?;
        let shapes = config.param_shapes();
        if u32_at(take(4)?) as usize != shapes.len() {
            return Err(bad("tensor count does not match config"));
        }
        let mut params = Vec::with_capacity(shapes.len());
        for (r, c) in shapes {
            let raw = take(4 * r * c)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            params.push(Matrix::from_shape_vec((r, c), data).expect("shape matches length"));
        }
        if !cur.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { config, params })
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn rms_norm_vec(x: &Array1<f64>, gain: ArrayView1<f64>) -> Array1<f64> {
    let d = x.len() as f64;
    let s = 1.0 / (x.dot(x) / d + 1e-5).sqrt();
    x * s * gain
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (0.797_884_560_802_865_4 * (v + 0.044715 * v * v * v)).tanh())
}

/// Incremental decoder with per-layer key/value caches.
pub struct Decoder<'m> {
    model: &'m TinyLM,
    keys: Vec<Vec<Array1<f64>>>,
    values: Vec<Vec<Array1<f64>>>,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m TinyLM) -> Self {
        let n = model.config.n_layers;
        Self {
            model,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        }
    }

    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feeds one token; returns the next-token distribution.
    pub fn step(&mut self, id: usize) -> Vec<f64> {
        let m = self.model;
        let cfg = &m.config;
        let pos = self.len();
        assert!(pos < cfg.context_length, "decoder context exhausted");
        let p = &m.params;
        let mut x = &p[0].row(id) + &p[1].row(pos);
        let hd = cfg.embed_dim / cfg.n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        for layer in 0..cfg.n_layers {
            let li = layer_idx(layer);
            let h = rms_norm_vec(&x, p[li.attn_norm].row(0));
            let q = h.dot(&p[li.wq]);
            self.keys[layer].push(h.dot(&p[li.wk]));
            self.values[layer].push(h.dot(&p[li.wv]));
            let mut att = Array1::zeros(cfg.embed_dim);
            for head in 0..cfg.n_heads {
                let r = head * hd..(head + 1) * hd;
                let qh = q.slice(ndarray::s![r.clone()]);
                let mut w: Vec<f64> = self.keys[layer]
                    .iter()
                    .map(|k| qh.dot(&k.slice(ndarray::s![r.clone()])) * scale)
                    .collect();
                softmax_in_place(&mut w);
                let mut out = att.slice_mut(ndarray::s![r.clone()]);
                for (wi, v) in w.iter().zip(&self.values[layer]) {
                    out.scaled_add(*wi, &v.slice(ndarray::s![r.clone()]));
                }
            }
            x = x + att.dot(&p[li.wo]);
            let h = rms_norm_vec(&x, p[li.ffn_norm].row(0));
            let up = h.dot(&p[li.w_in]).mapv(gelu);
            x = x + up.dot(&p[li.w_out]);
        }
        let fi = m.final_norm_idx();
        let h = rms_norm_vec(&x, p[fi].row(0));
        let mut logits = h.dot(&p[fi + 1]).to_vec();
        softmax_in_place(&mut logits);
        logits
    }
}
