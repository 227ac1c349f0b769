// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small pre-norm decoder-only transformer with residual-stream hooks.
//!
//! Layer indexing: layer `0` is the embedding output and layer `l >= 1` is
//! the residual stream at the output of block `l`. A model with `n_layers`
//! blocks therefore exposes layers `0..=n_layers` for capture, and layers
//! `0..n_layers` for injection (an injection at layer `l` replaces the
//! stream entering block `l + 1`).

pub mod checkpoint;
pub mod ops;
pub mod tokenizer;
pub mod train;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use tokenizer::{TokenSequence, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalScheme {
    LearnedAbsolute,
    Rotary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub positional_scheme: PositionalScheme,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 12,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 0,
            max_seq_len: 24,
            positional_scheme: PositionalScheme::LearnedAbsolute,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.positional_scheme == PositionalScheme::Rotary && self.head_dim() % 2 != 0 {
            return Err(Error::Config("rotary positions need an even head dimension".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One named parameter tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    tok_emb: usize,
    pos_emb: Option<usize>,
    blocks: Vec<BlockOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    unembed: usize,
}

fn build_layout(cfg: &ModelConfig) -> (Vec<ParamEntry>, Offsets, usize) {
    let mut entries = Vec::new();
    let mut total = 0usize;
    let mut push = |name: String, shape: Vec<usize>| {
        let offset = total;
        total += shape.iter().product::<usize>();
        entries.push(ParamEntry { name, shape, offset });
        offset
    };
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let tok_emb = push("tok_emb".into(), vec![v, d]);
    let pos_emb = match cfg.positional_scheme {
        PositionalScheme::LearnedAbsolute => Some(push("pos_emb".into(), vec![cfg.max_seq_len, d])),
        PositionalScheme::Rotary => None,
    };
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        blocks.push(BlockOffsets {
            ln1_g: push(p("ln1.weight"), vec![d]),
            ln1_b: push(p("ln1.bias"), vec![d]),
            wq: push(p("attn.wq"), vec![d, d]),
            wk: push(p("attn.wk"), vec![d, d]),
            wv: push(p("attn.wv"), vec![d, d]),
            wo: push(p("attn.wo"), vec![d, d]),
            ln2_g: push(p("ln2.weight"), vec![d]),
            ln2_b: push(p("ln2.bias"), vec![d]),
            w1: push(p("mlp.w1"), vec![d, f]),
            b1: push(p("mlp.b1"), vec![f]),
            w2: push(p("mlp.w2"), vec![f, d]),
            b2: push(p("mlp.b2"), vec![d]),
        });
    }
    let lnf_g = push("ln_f.weight".into(), vec![d]);
    let lnf_b = push("ln_f.bias".into(), vec![d]);
    let unembed = push("unembed".into(), vec![d, v]);
    let offsets = Offsets {
        tok_emb,
        pos_emb,
        blocks,
        lnf_g,
        lnf_b,
        unembed,
    };
    (entries, offsets, total)
}

/// One residual-stream vector at `(layer, position)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub layer: usize,
    pub position: usize,
    pub vector: Vec<f32>,
}

/// Replace the residual stream at `(layer, position)` with `vector`.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub layer: usize,
    pub position: usize,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Row-major `[seq_len, vocab_size]`.
    pub logits: Vec<f32>,
    pub captured: BTreeMap<usize, Vec<HiddenState>>,
}

impl ForwardTrace {
    pub fn logits_at(&self, position: usize) -> &[f32] {
        &self.logits[position * self.vocab_size..(position + 1) * self.vocab_size]
    }
}

/// Per-block activations retained for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct BlockCache {
    pub x_in: Vec<f32>,
    pub h1: Vec<f32>,
    pub ln1_mean: Vec<f32>,
    pub ln1_rstd: Vec<f32>,
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    pub probs: Vec<f32>,
    pub attn: Vec<f32>,
    pub x_mid: Vec<f32>,
    pub h2: Vec<f32>,
    pub ln2_mean: Vec<f32>,
    pub ln2_rstd: Vec<f32>,
    pub u_pre: Vec<f32>,
    pub u_act: Vec<f32>,
    pub tmp: Vec<f32>,
}

impl BlockCache {
    fn resize(&mut self, t: usize, cfg: &ModelConfig) {
        let (d, f, h) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        for buf in [
            &mut self.x_in,
            &mut self.h1,
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.attn,
            &mut self.x_mid,
            &mut self.h2,
            &mut self.tmp,
        ] {
            buf.resize(t * d, 0.0);
        }
        for buf in [&mut self.ln1_mean, &mut self.ln1_rstd, &mut self.ln2_mean, &mut self.ln2_rstd] {
            buf.resize(t, 0.0);
        }
        self.probs.resize(h * t * t, 0.0);
        self.u_pre.resize(t * f, 0.0);
        self.u_act.resize(t * f, 0.0);
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct HeadCache {
    pub x_final: Vec<f32>,
    pub hf: Vec<f32>,
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

/// Activations for a whole sequence (one [`BlockCache`] per block).
#[derive(Debug, Clone, Default)]
pub(crate) struct SeqCache {
    pub blocks: Vec<BlockCache>,
    pub head: HeadCache,
}

/// Trained (or freshly initialized) model parameters. Immutable during inference.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<f32>,
    entries: Vec<ParamEntry>,
    offsets: Offsets,
    rope_cos: Vec<f32>,
    rope_sin: Vec<f32>,
}

// Everything except the parameters is derived from the config.
impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

type InjectionRef<'a> = (usize, usize, &'a [f32]);

impl Model {
    /// Seeded random initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        let cfg = model.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let residual_scale = 1.0 / (2.0 * cfg.n_layers as f32).sqrt();
        for e in model.entries.clone() {
            let name = e.name.as_str();
            let std = if name.ends_with(".weight") {
                model.params[e.offset..e.offset + e.len()].fill(1.0);
                continue;
            } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                continue;
            } else if name == "tok_emb" || name == "pos_emb" {
                0.1
            } else {
                let fan_in = e.shape[0] as f32;
                let base = 1.0 / fan_in.sqrt();
                if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                    base * residual_scale
                } else {
                    base
                }
            };
            let normal = Normal::new(0.0f32, std).expect("finite std");
            for p in &mut model.params[e.offset..e.offset + e.len()] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(model)
    }

    pub(crate) fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (entries, offsets, total) = build_layout(&config);
        let (rope_cos, rope_sin) = match config.positional_scheme {
            PositionalScheme::Rotary => ops::rotary_tables(config.max_seq_len, config.head_dim()),
            PositionalScheme::LearnedAbsolute => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            config,
            params: vec![0.0; total],
            entries,
            offsets,
            rope_cos,
            rope_sin,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    fn p(&self, off: usize, len: usize) -> &[f32] {
        &self.params[off..off + len]
    }

    /// Unpatched forward pass capturing the requested layers.
    pub fn forward(&self, tokens: &TokenSequence, capture_layers: &BTreeSet<usize>) -> Result<ForwardTrace> {
        self.forward_with(tokens.as_slice(), capture_layers, &[])
    }

    /// Forward pass with residual-stream replacements.
    pub fn forward_patched(&self, tokens: &TokenSequence, injections: &[Injection]) -> Result<ForwardTrace> {
        self.forward_with(tokens.as_slice(), &BTreeSet::new(), injections)
    }

    /// General entry point: capture and inject in one pass. Captured states
    /// reflect any injection applied at the same `(layer, position)`.
    pub fn forward_with(
        &self,
        tokens: &[u32],
        capture_layers: &BTreeSet<usize>,
        injections: &[Injection],
    ) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        for &l in capture_layers {
            if l > self.config.n_layers {
                return Err(Error::LayerOutOfRange {
                    layer: l,
                    max: self.config.n_layers,
                });
            }
        }
        let inj = self.check_injections(injections, tokens.len())?;
        let mut cache = SeqCache {
            blocks: vec![BlockCache::default()],
            head: HeadCache::default(),
        };
        let mut captured = BTreeMap::new();
        let logits = self.run(tokens, &inj, capture_layers, &mut captured, &mut cache);
        Ok(ForwardTrace {
            seq_len: tokens.len(),
            vocab_size: self.config.vocab_size,
            logits,
            captured,
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_injections<'a>(&self, injections: &'a [Injection], seq_len: usize) -> Result<Vec<InjectionRef<'a>>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(injections.len());
        for inj in injections {
            if inj.layer >= self.config.n_layers {
                return Err(Error::LayerOutOfRange {
                    layer: inj.layer,
                    max: self.config.n_layers - 1,
                });
            }
            if inj.position >= seq_len {
                return Err(Error::PositionOutOfRange {
                    position: inj.position,
                    len: seq_len,
                });
            }
            if inj.vector.len() != self.config.d_model {
                return Err(Error::DimensionMismatch {
                    expected: self.config.d_model,
                    got: inj.vector.len(),
                });
            }
            if inj.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("injected vector has non-finite entries".into()));
            }
            if !seen.insert((inj.layer, inj.position)) {
                return Err(Error::DuplicateInjection {
                    layer: inj.layer,
                    position: inj.position,
                });
            }
            out.push((inj.layer, inj.position, inj.vector.as_slice()));
        }
        Ok(out)
    }

    fn apply_layer_hooks(
        &self,
        layer: usize,
        x: &mut [f32],
        t: usize,
        inj: &[InjectionRef<'_>],
        capture: &BTreeSet<usize>,
        captured: &mut BTreeMap<usize, Vec<HiddenState>>,
    ) {
        let d = self.config.d_model;
        for &(l, pos, v) in inj {
            if l == layer {
                x[pos * d..(pos + 1) * d].copy_from_slice(v);
            }
        }
        if capture.contains(&layer) {
            let states = (0..t)
                .map(|i| HiddenState {
                    layer,
                    position: i,
                    vector: x[i * d..(i + 1) * d].to_vec(),
                })
                .collect();
            captured.insert(layer, states);
        }
    }

    /// Shared forward path. With a single block cache it is reused across
    /// blocks (inference); with `n_layers` caches every block is retained.
    pub(crate) fn run(
        &self,
        tokens: &[u32],
        inj: &[InjectionRef<'_>],
        capture: &BTreeSet<usize>,
        captured: &mut BTreeMap<usize, Vec<HiddenState>>,
        cache: &mut SeqCache,
    ) -> Vec<f32> {
        let cfg = &self.config;
        let (t, d) = (tokens.len(), cfg.d_model);
        let mut x = vec![0.0f32; t * d];
        self.embed(tokens, &mut x);
        self.apply_layer_hooks(0, &mut x, t, inj, capture, captured);
        let reuse = cache.blocks.len() == 1;
        for l in 0..cfg.n_layers {
            let bc = if reuse { &mut cache.blocks[0] } else { &mut cache.blocks[l] };
            self.block_forward(l, &mut x, t, bc);
            self.apply_layer_hooks(l + 1, &mut x, t, inj, capture, captured);
        }
        self.head_forward(&x, t, &mut cache.head)
    }

    fn embed(&self, tokens: &[u32], x: &mut [f32]) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let o = &self.offsets;
        for (i, &tok) in tokens.iter().enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            row.copy_from_slice(self.p(o.tok_emb + tok as usize * d, d));
            if let Some(pe) = o.pos_emb {
                for (r, p) in row.iter_mut().zip(self.p(pe + i * d, d)) {
                    *r += p;
                }
            }
        }
    }

    fn block_forward(&self, l: usize, x: &mut [f32], t: usize, c: &mut BlockCache) {
        let cfg = &self.config;
        let (d, f, h) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        let b = self.offsets.blocks[l];
        c.resize(t, cfg);
        c.x_in.copy_from_slice(x);
        ops::layernorm(x, d, self.p(b.ln1_g, d), self.p(b.ln1_b, d), &mut c.h1, &mut c.ln1_mean, &mut c.ln1_rstd);
        ops::matmul(&c.h1, t, d, self.p(b.wq, d * d), d, &mut c.q);
        ops::matmul(&c.h1, t, d, self.p(b.wk, d * d), d, &mut c.k);
        ops::matmul(&c.h1, t, d, self.p(b.wv, d * d), d, &mut c.v);
        if cfg.positional_scheme == PositionalScheme::Rotary {
            ops::apply_rotary(&mut c.q, t, d, h, &self.rope_cos, &self.rope_sin, false);
            ops::apply_rotary(&mut c.k, t, d, h, &self.rope_cos, &self.rope_sin, false);
        }
        ops::causal_attention(&c.q, &c.k, &c.v, t, d, h, &mut c.attn, &mut c.probs);
        ops::matmul(&c.attn, t, d, self.p(b.wo, d * d), d, &mut c.tmp);
        for (xi, o) in x.iter_mut().zip(&c.tmp) {
            *xi += o;
        }
        c.x_mid.copy_from_slice(x);
        ops::layernorm(x, d, self.p(b.ln2_g, d), self.p(b.ln2_b, d), &mut c.h2, &mut c.ln2_mean, &mut c.ln2_rstd);
        ops::matmul(&c.h2, t, d, self.p(b.w1, d * f), f, &mut c.u_pre);
        ops::add_bias(&mut c.u_pre, f, self.p(b.b1, f));
        for (a, &u) in c.u_act.iter_mut().zip(&c.u_pre) {
            *a = ops::gelu(u);
        }
        ops::matmul(&c.u_act, t, f, self.p(b.w2, f * d), d, &mut c.tmp);
        ops::add_bias(&mut c.tmp, d, self.p(b.b2, d));
        for (xi, m) in x.iter_mut().zip(&c.tmp) {
            *xi += m;
        }
    }

    fn head_forward(&self, x: &[f32], t: usize, c: &mut HeadCache) -> Vec<f32> {
        let cfg = &self.config;
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let o = &self.offsets;
        c.x_final = x.to_vec();
        c.hf.resize(t * d, 0.0);
        c.mean.resize(t, 0.0);
        c.rstd.resize(t, 0.0);
        ops::layernorm(x, d, self.p(o.lnf_g, d), self.p(o.lnf_b, d), &mut c.hf, &mut c.mean, &mut c.rstd);
        let mut logits = vec![0.0f32; t * v];
        ops::matmul(&c.hf, t, d, self.p(o.unembed, d * v), v, &mut logits);
        logits
    }

    /// Logit lens: final layer norm and unembedding applied to one residual vector.
    pub fn unembed_state(&self, vector: &[f32]) -> Result<Vec<f32>> {
        let d = self.config.d_model;
        if vector.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: vector.len(),
            });
        }
        Ok(self.head_forward(vector, 1, &mut HeadCache::default()))
    }

    /// Greedy argmax decoding. Injections are validated against the prompt
    /// and therefore only ever touch prompt positions. EOS is not returned.
    pub fn greedy_generate(&self, prompt: &TokenSequence, max_new: usize, injections: &[Injection]) -> Result<Vec<u32>> {
        if max_new == 0 {
            return Err(Error::InvalidArgument("max_new must be at least 1".into()));
        }
        self.check_injections(injections, prompt.len())?;
        let mut seq = prompt.as_slice().to_vec();
        let mut out = Vec::new();
        let none = BTreeSet::new();
        for _ in 0..max_new {
            let trace = self.forward_with(&seq, &none, injections)?;
            let next = ops::argmax(trace.logits_at(seq.len() - 1)) as u32;
            if next == tokenizer::EOS {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    /// Teacher-forced log-probability of `continuation` after `prompt`.
    pub fn sequence_logprob(&self, prompt: &TokenSequence, continuation: &[u32], injections: &[Injection]) -> Result<f64> {
        if continuation.is_empty() {
            return Err(Error::InvalidArgument("empty continuation".into()));
        }
        let mut seq = prompt.as_slice().to_vec();
        seq.extend_from_slice(continuation);
        self.check_injections(injections, prompt.len())?;
        let trace = self.forward_with(&seq, &BTreeSet::new(), injections)?;
        let start = prompt.len() - 1;
        let mut total = 0.0f64;
        for (k, &tok) in continuation.iter().enumerate() {
            let lp = ops::log_softmax(trace.logits_at(start + k));
            total += lp[tok as usize];
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(scheme: PositionalScheme) -> Model {
        Model::new(ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 11,
            max_seq_len: 12,
            positional_scheme: scheme,
            seed: 7,
        })
        .unwrap()
    }

    fn seq(v: &[u32]) -> TokenSequence {
        TokenSequence::new(v.to_vec()).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig {
            vocab_size: 10,
            ..Default::default()
        };
        assert!(c.validate().is_ok());
        c.n_heads = 5;
        assert!(c.validate().is_err());
        c.n_heads = 4;
        c.d_ff = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_is_deterministic_and_capture_is_transparent() {
        for scheme in [PositionalScheme::LearnedAbsolute, PositionalScheme::Rotary] {
            let m = tiny(scheme);
            let s = seq(&[1, 4, 5, 6, 7]);
            let a = m.forward(&s, &BTreeSet::new()).unwrap();
            let b = m.forward(&s, &BTreeSet::new()).unwrap();
            assert_eq!(a.logits, b.logits);
            assert!(a.captured.is_empty());
            let c = m.forward(&s, &[0, 2, 3].into_iter().collect()).unwrap();
            assert_eq!(a.logits, c.logits);
            assert_eq!(c.captured.keys().copied().collect::<Vec<_>>(), vec![0, 2, 3]);
            assert!(c.captured[&2].iter().all(|h| h.vector.len() == 16));
        }
    }

    #[test]
    fn causality_prefix_states_ignore_later_tokens() {
        let m = tiny(PositionalScheme::Rotary);
        let layers: BTreeSet<usize> = (0..=3).collect();
        let a = m.forward(&seq(&[1, 4, 5, 6, 7]), &layers).unwrap();
        let b = m.forward(&seq(&[1, 4, 5, 9, 7]), &layers).unwrap();
        for l in 0..=3 {
            for i in 0..3 {
                assert_eq!(a.captured[&l][i].vector, b.captured[&l][i].vector);
            }
            assert_ne!(a.captured[&l][3].vector, b.captured[&l][3].vector);
        }
    }

    #[test]
    fn injection_validation() {
        let m = tiny(PositionalScheme::LearnedAbsolute);
        let s = seq(&[1, 4, 5]);
        let v = vec![0.0; 16];
        let inj = |layer, position| Injection {
            layer,
            position,
            vector: v.clone(),
        };
        assert!(matches!(m.forward_patched(&s, &[inj(3, 0)]), Err(Error::LayerOutOfRange { .. })));
        assert!(matches!(m.forward_patched(&s, &[inj(1, 3)]), Err(Error::PositionOutOfRange { .. })));
        assert!(matches!(
            m.forward_patched(&s, &[inj(1, 1), inj(1, 1)]),
            Err(Error::DuplicateInjection { .. })
        ));
        let short = Injection {
            layer: 0,
            position: 0,
            vector: vec![0.0; 3],
        };
        assert!(matches!(m.forward_patched(&s, &[short]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let m = tiny(PositionalScheme::LearnedAbsolute);
        let s = seq(&[1; 13]);
        assert!(matches!(m.forward(&s, &BTreeSet::new()), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn self_patch_is_bitwise_noop() {
        let m = tiny(PositionalScheme::LearnedAbsolute);
        let s = seq(&[1, 4, 5, 6]);
        let base = m.forward(&s, &[2].into_iter().collect()).unwrap();
        let inj: Vec<Injection> = base.captured[&2]
            .iter()
            .map(|h| Injection {
                layer: 2,
                position: h.position,
                vector: h.vector.clone(),
            })
            .collect();
        let patched = m.forward_patched(&s, &inj).unwrap();
        assert_eq!(base.logits, patched.logits);
    }

    #[test]
    fn logprob_of_single_token_is_log_softmax() {
        let m = tiny(PositionalScheme::LearnedAbsolute);
        let p = seq(&[1, 4, 5]);
        let lp = m.sequence_logprob(&p, &[6], &[]).unwrap();
        let trace = m.forward(&p, &BTreeSet::new()).unwrap();
        let expect = ops::log_softmax(trace.logits_at(2))[6];
        assert_eq!(lp, expect);
        assert!(lp <= 0.0);
        assert!(m.sequence_logprob(&p, &[], &[]).is_err());
    }

    #[test]
    fn greedy_single_step_is_argmax() {
        let m = tiny(PositionalScheme::LearnedAbsolute);
        let p = seq(&[1, 4, 5]);
        let trace = m.forward(&p, &BTreeSet::new()).unwrap();
        let best = ops::argmax(trace.logits_at(2)) as u32;
        let gen = m.greedy_generate(&p, 1, &[]).unwrap();
        if best == tokenizer::EOS {
            assert!(gen.is_empty());
        } else {
            assert_eq!(gen, vec![best]);
        }
        assert!(m.greedy_generate(&p, 0, &[]).is_err());
    }
}
