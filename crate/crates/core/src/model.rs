//! A small pre-LayerNorm GPT-style decoder with tied input/output embeddings.
//!
//! Every linear map is bias-free, so the only vectors in a block are the two
//! LayerNorm scale/bias pairs. Forward and backward run on a ragged batch of
//! sequences stacked row-wise; only attention looks across rows, and it does
//! so within each sequence's own span.

use std::fmt;
use std::ops::Deref;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, gemm, log_sum_exp, softmax_in_place, Tensor2D, View, ViewMut};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        if self.n_layers < 1 {
            return Err(Error::config("n_layers must be at least 1"));
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::config("d_ff must be positive"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Ordered token ids. Emptiness is allowed at the type level (a zero-step
/// decode yields one); operations that need tokens reject it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(bad) = self.0.iter().find(|t| **t as usize >= vocab_size) {
            return Err(Error::config(format!(
                "token id {bad} out of range for vocab {vocab_size}"
            )));
        }
        Ok(())
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }
}

impl Deref for TokenSequence {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

/// The six weight matrices of a block; the units pruning operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LinearKind {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpUp,
    MlpDown,
}

impl LinearKind {
    pub const ALL: [LinearKind; 6] = [
        LinearKind::AttnQ,
        LinearKind::AttnK,
        LinearKind::AttnV,
        LinearKind::AttnO,
        LinearKind::MlpUp,
        LinearKind::MlpDown,
    ];

    pub const ATTENTION: [LinearKind; 4] = [
        LinearKind::AttnQ,
        LinearKind::AttnK,
        LinearKind::AttnV,
        LinearKind::AttnO,
    ];

    pub fn is_attention(self) -> bool {
        !matches!(self, LinearKind::MlpUp | LinearKind::MlpDown)
    }

    pub fn name(self) -> &'static str {
        match self {
            LinearKind::AttnQ => "attn_q",
            LinearKind::AttnK => "attn_k",
            LinearKind::AttnV => "attn_v",
            LinearKind::AttnO => "attn_o",
            LinearKind::MlpUp => "mlp_up",
            LinearKind::MlpDown => "mlp_down",
        }
    }
}

impl fmt::Display for LinearKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_scale: Tensor2D,
    pub ln1_bias: Tensor2D,
    pub attn_q: Tensor2D,
    pub attn_k: Tensor2D,
    pub attn_v: Tensor2D,
    pub attn_o: Tensor2D,
    pub ln2_scale: Tensor2D,
    pub ln2_bias: Tensor2D,
    pub mlp_up: Tensor2D,
    pub mlp_down: Tensor2D,
}

impl LayerParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        Self {
            ln1_scale: Tensor2D::zeros(1, d),
            ln1_bias: Tensor2D::zeros(1, d),
            attn_q: Tensor2D::zeros(d, d),
            attn_k: Tensor2D::zeros(d, d),
            attn_v: Tensor2D::zeros(d, d),
            attn_o: Tensor2D::zeros(d, d),
            ln2_scale: Tensor2D::zeros(1, d),
            ln2_bias: Tensor2D::zeros(1, d),
            mlp_up: Tensor2D::zeros(d, f),
            mlp_down: Tensor2D::zeros(f, d),
        }
    }

    pub fn linear(&self, kind: LinearKind) -> &Tensor2D {
        match kind {
            LinearKind::AttnQ => &self.attn_q,
            LinearKind::AttnK => &self.attn_k,
            LinearKind::AttnV => &self.attn_v,
            LinearKind::AttnO => &self.attn_o,
            LinearKind::MlpUp => &self.mlp_up,
            LinearKind::MlpDown => &self.mlp_down,
        }
    }

    pub fn linear_mut(&mut self, kind: LinearKind) -> &mut Tensor2D {
        match kind {
            LinearKind::AttnQ => &mut self.attn_q,
            LinearKind::AttnK => &mut self.attn_k,
            LinearKind::AttnV => &mut self.attn_v,
            LinearKind::AttnO => &mut self.attn_o,
            LinearKind::MlpUp => &mut self.mlp_up,
            LinearKind::MlpDown => &mut self.mlp_down,
        }
    }

    fn named(&self) -> [(&'static str, &Tensor2D); 10] {
        [
            ("ln1_scale", &self.ln1_scale),
            ("ln1_bias", &self.ln1_bias),
            ("attn_q", &self.attn_q),
            ("attn_k", &self.attn_k),
            ("attn_v", &self.attn_v),
            ("attn_o", &self.attn_o),
            ("ln2_scale", &self.ln2_scale),
            ("ln2_bias", &self.ln2_bias),
            ("mlp_up", &self.mlp_up),
            ("mlp_down", &self.mlp_down),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor2D); 10] {
        [
            ("ln1_scale", &mut self.ln1_scale),
            ("ln1_bias", &mut self.ln1_bias),
            ("attn_q", &mut self.attn_q),
            ("attn_k", &mut self.attn_k),
            ("attn_v", &mut self.attn_v),
            ("attn_o", &mut self.attn_o),
            ("ln2_scale", &mut self.ln2_scale),
            ("ln2_bias", &mut self.ln2_bias),
            ("mlp_up", &mut self.mlp_up),
            ("mlp_down", &mut self.mlp_down),
        ]
    }
}

/// All weights of the decoder. The output head reuses `token_embedding`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embedding: Tensor2D,
    pub positional_embedding: Tensor2D,
    pub layers: Vec<LayerParams>,
    pub ln_f_scale: Tensor2D,
    pub ln_f_bias: Tensor2D,
}

impl ModelParams {
    /// Every tensor zero, LayerNorm scales included.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            config: config.clone(),
            token_embedding: Tensor2D::zeros(config.vocab_size, d),
            positional_embedding: Tensor2D::zeros(config.max_seq_len, d),
            layers: (0..config.n_layers).map(|_| LayerParams::zeros(config)).collect(),
            ln_f_scale: Tensor2D::zeros(1, d),
            ln_f_bias: Tensor2D::zeros(1, d),
        })
    }

    /// GPT-style initialization: N(0, 0.02) everywhere, residual output
    /// projections scaled by 1/sqrt(2 * n_layers), LayerNorm scale 1, bias 0.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        Self::init_with_std(config, INIT_STD)
    }

    pub fn init_with_std(config: &ModelConfig, std: f64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut fill = |t: &mut Tensor2D, scale: f64| {
            for v in t.as_mut_slice() {
                *v = normal.sample(&mut rng) * scale;
            }
        };
        fill(&mut params.token_embedding, 1.0);
        fill(&mut params.positional_embedding, 1.0);
        for layer in &mut params.layers {
            layer.ln1_scale.fill(1.0);
            layer.ln2_scale.fill(1.0);
            for kind in LinearKind::ALL {
                let scale = match kind {
                    LinearKind::AttnO | LinearKind::MlpDown => residual_scale,
                    _ => 1.0,
                };
                fill(layer.linear_mut(kind), scale);
            }
        }
        params.ln_f_scale.fill(1.0);
        Ok(params)
    }

    /// Tensors in canonical (checkpoint) order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor2D)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("positional_embedding".to_string(), &self.positional_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("ln_f_scale".to_string(), &self.ln_f_scale));
        out.push(("ln_f_bias".to_string(), &self.ln_f_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor2D)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("positional_embedding".to_string(), &mut self.positional_embedding),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.named_mut() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("ln_f_scale".to_string(), &mut self.ln_f_scale));
        out.push(("ln_f_bias".to_string(), &mut self.ln_f_bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Round every weight through f32, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            for v in t.as_mut_slice() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Checks tensor shapes against the embedded config.
    pub fn validate(&self) -> Result<()> {
        let reference = Self::zeros(&self.config)?;
        let expected = reference.named_tensors();
        let actual = self.named_tensors();
        if expected.len() != actual.len() {
            return Err(Error::config(format!(
                "expected {} tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((name, e), (_, a)) in expected.iter().zip(&actual) {
            if e.shape() != a.shape() {
                return Err(Error::config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    e.shape()
                )));
            }
        }
        Ok(())
    }

    /// Elementwise `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        let others = other.named_tensors();
        for ((_, t), (_, o)) in self.named_tensors_mut().into_iter().zip(others) {
            for (a, b) in t.as_mut_slice().iter_mut().zip(o.as_slice()) {
                *a += alpha * b;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, t) in self.named_tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.as_slice())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Logits for one sequence, `[len × vocab]`.
    pub fn forward(&self, input: &[u32]) -> Result<Tensor2D> {
        Ok(self.run(&[input], false)?.0)
    }

    /// Logits for a ragged batch, rows stacked in input order.
    pub fn forward_batch(&self, inputs: &[&[u32]]) -> Result<Tensor2D> {
        Ok(self.run(inputs, false)?.0)
    }

    /// Mean next-token negative log-likelihood in nats per predicted token.
    pub fn sequence_nll(&self, seq: &[u32]) -> Result<f64> {
        if seq.len() < 2 {
            return Err(Error::degenerate(format!(
                "need at least 2 tokens to score, got {}",
                seq.len()
            )));
        }
        let logits = self.forward(seq)?;
        Ok(next_token_nll_sum(&logits, &[Span::new(0, seq.len())], &[seq]) / (seq.len() - 1) as f64)
    }

    /// Greedy continuation of `prefix` by `n_new` tokens. Ties resolve to the
    /// lowest token id.
    pub fn greedy_decode(&self, prefix: &[u32], n_new: usize) -> Result<TokenSequence> {
        if n_new == 0 {
            return Ok(TokenSequence::default());
        }
        if prefix.is_empty() {
            return Err(Error::degenerate("greedy decoding needs a non-empty prefix"));
        }
        let total = prefix.len() + n_new;
        if total > self.config.max_seq_len {
            return Err(Error::Length {
                len: total,
                max: self.config.max_seq_len,
            });
        }
        let mut tokens = prefix.to_vec();
        for _ in 0..n_new {
            let logits = self.forward(&tokens)?;
            let next = argmax(logits.row(logits.rows() - 1)) as u32;
            tokens.push(next);
        }
        Ok(TokenSequence(tokens.split_off(prefix.len())))
    }

    /// Argmax prediction at every position of `seq` in one causal pass.
    /// Entry `t` is the greedy choice for token `t + 1`.
    pub fn greedy_predictions(&self, seq: &[u32]) -> Result<Vec<u32>> {
        let logits = self.forward(seq)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r)) as u32).collect())
    }

    /// Mean next-token cross-entropy over every predicted token in the batch,
    /// and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &[&[u32]]) -> Result<(f64, ModelParams)> {
        if let Some(short) = batch.iter().find(|s| s.len() < 2) {
            return Err(Error::degenerate(format!(
                "training sequences need at least 2 tokens, got {}",
                short.len()
            )));
        }
        let (logits, cache) = self.run(batch, true)?;
        let cache = cache.expect("cache requested");
        let targets: usize = batch.iter().map(|s| s.len() - 1).sum();
        let inv = 1.0 / targets as f64;

        let mut loss = 0.0;
        let mut dlogits = logits;
        for (span, seq) in cache.spans.iter().zip(batch) {
            for t in 0..span.len {
                let row = dlogits.row_mut(span.start + t);
                if t + 1 == span.len {
                    row.fill(0.0);
                    continue;
                }
                let target = seq[t + 1] as usize;
                loss -= row[target] - log_sum_exp(row);
                softmax_in_place(row);
                row[target] -= 1.0;
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
        loss *= inv;
        let grads = self.backward(batch, &cache, &dlogits)?;
        Ok((loss, grads))
    }

    fn check_inputs(&self, inputs: &[&[u32]]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::degenerate("empty batch"));
        }
        for seq in inputs {
            if seq.is_empty() {
                return Err(Error::degenerate("empty input sequence"));
            }
            if seq.len() > self.config.max_seq_len {
                return Err(Error::Length {
                    len: seq.len(),
                    max: self.config.max_seq_len,
                });
            }
            if let Some(bad) = seq.iter().find(|t| **t as usize >= self.config.vocab_size) {
                return Err(Error::config(format!(
                    "token id {bad} out of range for vocab {}",
                    self.config.vocab_size
                )));
            }
        }
        if self.layers.len() != self.config.n_layers
            || self.token_embedding.shape() != (self.config.vocab_size, self.config.d_model)
        {
            return Err(Error::config("parameter shapes disagree with model config"));
        }
        Ok(())
    }

    fn run(&self, inputs: &[&[u32]], keep: bool) -> Result<(Tensor2D, Option<Cache>)> {
        self.check_inputs(inputs)?;
        let cfg = &self.config;
        let d = cfg.d_model;
        let spans = Span::stack(inputs);
        let n: usize = inputs.iter().map(|s| s.len()).sum();

        let mut x = Tensor2D::zeros(n, d);
        for (span, seq) in spans.iter().zip(inputs) {
            for (t, tok) in seq.iter().enumerate() {
                let e = self.token_embedding.row(*tok as usize);
                let p = self.positional_embedding.row(t);
                for ((o, a), b) in x.row_mut(span.start + t).iter_mut().zip(e).zip(p) {
                    *o = a + b;
                }
            }
        }

        let mut layer_caches = Vec::with_capacity(if keep { cfg.n_layers } else { 0 });
        for layer in &self.layers {
            let (next, lc) = self.layer_forward(layer, x, &spans);
            x = next;
            if keep {
                layer_caches.push(lc);
            }
        }

        let (hf, lnf) = layer_norm(&x, &self.ln_f_scale, &self.ln_f_bias);
        let mut logits = Tensor2D::zeros(n, cfg.vocab_size);
        gemm(1.0, hf.view(), self.token_embedding.view().t(), 0.0, logits.view_mut());

        let cache = keep.then_some(Cache {
            spans,
            layers: layer_caches,
            lnf,
            hf,
        });
        Ok((logits, cache))
    }

    fn layer_forward(&self, layer: &LayerParams, x: Tensor2D, spans: &[Span]) -> (Tensor2D, LayerCache) {
        let cfg = &self.config;
        let (d, heads, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let n = x.rows();
        let scale = 1.0 / (hd as f64).sqrt();

        let (h1, ln1) = layer_norm(&x, &layer.ln1_scale, &layer.ln1_bias);
        let q = h1.matmul(&layer.attn_q);
        let k = h1.matmul(&layer.attn_k);
        let v = h1.matmul(&layer.attn_v);

        let prob_len: usize = spans.iter().map(|s| heads * s.len * s.len).sum();
        let mut probs = vec![0.0; prob_len];
        let mut attn = Tensor2D::zeros(n, d);
        let mut poff = 0;
        for span in spans {
            let t = span.len;
            for h in 0..heads {
                let block = &mut probs[poff..poff + t * t];
                let qv = View::strided(q.as_slice(), span.start * d + h * hd, t, hd, d, 1);
                let kv = View::strided(k.as_slice(), span.start * d + h * hd, t, hd, d, 1);
                gemm(scale, qv, kv.t(), 0.0, ViewMut::full(block, t, t));
                for i in 0..t {
                    let row = &mut block[i * t..(i + 1) * t];
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].fill(0.0);
                }
                let vv = View::strided(v.as_slice(), span.start * d + h * hd, t, hd, d, 1);
                let out = ViewMut::strided(attn.as_mut_slice(), span.start * d + h * hd, t, hd, d, 1);
                gemm(1.0, View::full(block, t, t), vv, 0.0, out);
                poff += t * t;
            }
        }

        let mut x1 = x;
        gemm(1.0, attn.view(), layer.attn_o.view(), 1.0, x1.view_mut());

        let (h2, ln2) = layer_norm(&x1, &layer.ln2_scale, &layer.ln2_bias);
        let up = h2.matmul(&layer.mlp_up);
        let mut act = up.clone();
        act.as_mut_slice().iter_mut().for_each(|u| *u = gelu(*u));
        let mut x2 = x1;
        gemm(1.0, act.view(), layer.mlp_down.view(), 1.0, x2.view_mut());

        let cache = LayerCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            attn,
            ln2,
            h2,
            up,
            act,
        };
        (x2, cache)
    }

    fn backward(&self, batch: &[&[u32]], cache: &Cache, dlogits: &Tensor2D) -> Result<ModelParams> {
        let cfg = &self.config;
        let mut grads = ModelParams::zeros(cfg)?;

        // logits = hf · Eᵀ
        gemm(1.0, dlogits.view().t(), cache.hf.view(), 0.0, grads.token_embedding.view_mut());
        let dhf = dlogits.matmul(&self.token_embedding);
        let mut dx = layer_norm_backward(
            &dhf,
            &cache.lnf,
            &self.ln_f_scale,
            &mut grads.ln_f_scale,
            &mut grads.ln_f_bias,
        );

        for (i, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            dx = self.layer_backward(layer, lc, &cache.spans, dx, &mut grads.layers[i]);
        }

        for (span, seq) in cache.spans.iter().zip(batch) {
            for (t, tok) in seq.iter().enumerate() {
                let g = dx.row(span.start + t);
                for (o, v) in grads.token_embedding.row_mut(*tok as usize).iter_mut().zip(g) {
                    *o += v;
                }
                for (o, v) in grads.positional_embedding.row_mut(t).iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        Ok(grads)
    }

    fn layer_backward(
        &self,
        layer: &LayerParams,
        lc: &LayerCache,
        spans: &[Span],
        dx2: Tensor2D,
        g: &mut LayerParams,
    ) -> Tensor2D {
        let cfg = &self.config;
        let (d, heads, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();

        // MLP branch: x2 = x1 + gelu(h2 · up) · down
        gemm(1.0, lc.act.view().t(), dx2.view(), 0.0, g.mlp_down.view_mut());
        let mut dup = Tensor2D::zeros(dx2.rows(), cfg.d_ff);
        gemm(1.0, dx2.view(), layer.mlp_down.view().t(), 0.0, dup.view_mut());
        for (du, u) in dup.as_mut_slice().iter_mut().zip(lc.up.as_slice()) {
            *du *= gelu_grad(*u);
        }
        gemm(1.0, lc.h2.view().t(), dup.view(), 0.0, g.mlp_up.view_mut());
        let mut dh2 = Tensor2D::zeros(dup.rows(), d);
        gemm(1.0, dup.view(), layer.mlp_up.view().t(), 0.0, dh2.view_mut());
        let mut dx1 = layer_norm_backward(&dh2, &lc.ln2, &layer.ln2_scale, &mut g.ln2_scale, &mut g.ln2_bias);
        for (a, b) in dx1.as_mut_slice().iter_mut().zip(dx2.as_slice()) {
            *a += b;
        }

        // attention branch: x1 = x + attn · o
        gemm(1.0, lc.attn.view().t(), dx1.view(), 0.0, g.attn_o.view_mut());
        let n = dx1.rows();
        let mut dattn = Tensor2D::zeros(n, d);
        gemm(1.0, dx1.view(), layer.attn_o.view().t(), 0.0, dattn.view_mut());

        let mut dq = Tensor2D::zeros(n, d);
        let mut dk = Tensor2D::zeros(n, d);
        let mut dv = Tensor2D::zeros(n, d);
        let mut poff = 0;
        for span in spans {
            let t = span.len;
            let base = span.start * d;
            for h in 0..heads {
                let p = &lc.probs[poff..poff + t * t];
                let da = View::strided(dattn.as_slice(), base + h * hd, t, hd, d, 1);
                let vv = View::strided(lc.v.as_slice(), base + h * hd, t, hd, d, 1);
                let mut ds = vec![0.0; t * t];
                gemm(1.0, da, vv.t(), 0.0, ViewMut::full(&mut ds, t, t));
                gemm(
                    1.0,
                    View::full(p, t, t).t(),
                    da,
                    0.0,
                    ViewMut::strided(dv.as_mut_slice(), base + h * hd, t, hd, d, 1),
                );
                for i in 0..t {
                    let prow = &p[i * t..(i + 1) * t];
                    let drow = &mut ds[i * t..(i + 1) * t];
                    let dot: f64 = prow[..=i].iter().zip(&drow[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        drow[j] = prow[j] * (drow[j] - dot);
                    }
                    drow[i + 1..].fill(0.0);
                }
                let qv = View::strided(lc.q.as_slice(), base + h * hd, t, hd, d, 1);
                let kv = View::strided(lc.k.as_slice(), base + h * hd, t, hd, d, 1);
                gemm(
                    scale,
                    View::full(&ds, t, t),
                    kv,
                    0.0,
                    ViewMut::strided(dq.as_mut_slice(), base + h * hd, t, hd, d, 1),
                );
                gemm(
                    scale,
                    View::full(&ds, t, t).t(),
                    qv,
                    0.0,
                    ViewMut::strided(dk.as_mut_slice(), base + h * hd, t, hd, d, 1),
                );
                poff += t * t;
            }
        }

        gemm(1.0, lc.h1.view().t(), dq.view(), 0.0, g.attn_q.view_mut());
        gemm(1.0, lc.h1.view().t(), dk.view(), 0.0, g.attn_k.view_mut());
        gemm(1.0, lc.h1.view().t(), dv.view(), 0.0, g.attn_v.view_mut());
        let mut dh1 = Tensor2D::zeros(n, d);
        gemm(1.0, dq.view(), layer.attn_q.view().t(), 0.0, dh1.view_mut());
        gemm(1.0, dk.view(), layer.attn_k.view().t(), 1.0, dh1.view_mut());
        gemm(1.0, dv.view(), layer.attn_v.view().t(), 1.0, dh1.view_mut());
        let mut dx = layer_norm_backward(&dh1, &lc.ln1, &layer.ln1_scale, &mut g.ln1_scale, &mut g.ln1_bias);
        for (a, b) in dx.as_mut_slice().iter_mut().zip(dx1.as_slice()) {
            *a += b;
        }
        dx
    }
}

/// Sum over the batch of `-ln softmax(logits[t])[token t+1]`.
fn next_token_nll_sum(logits: &Tensor2D, spans: &[Span], seqs: &[&[u32]]) -> f64 {
    let mut total = 0.0;
    for (span, seq) in spans.iter().zip(seqs) {
        for t in 0..span.len.saturating_sub(1) {
            let row = logits.row(span.start + t);
            total += log_sum_exp(row) - row[seq[t + 1] as usize];
        }
    }
    total
}

#[derive(Debug, Clone, Copy)]
struct Span {
    start: usize,
    len: usize,
}

impl Span {
    fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    fn stack(inputs: &[&[u32]]) -> Vec<Span> {
        let mut start = 0;
        inputs
            .iter()
            .map(|s| {
                let span = Span::new(start, s.len());
                start += s.len();
                span
            })
            .collect()
    }
}

struct NormCache {
    xhat: Tensor2D,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: NormCache,
    h1: Tensor2D,
    q: Tensor2D,
    k: Tensor2D,
    v: Tensor2D,
    probs: Vec<f64>,
    attn: Tensor2D,
    ln2: NormCache,
    h2: Tensor2D,
    up: Tensor2D,
    act: Tensor2D,
}

struct Cache {
    spans: Vec<Span>,
    layers: Vec<LayerCache>,
    lnf: NormCache,
    hf: Tensor2D,
}

fn layer_norm(x: &Tensor2D, scale: &Tensor2D, bias: &Tensor2D) -> (Tensor2D, NormCache) {
    let (n, d) = x.shape();
    let mut xhat = Tensor2D::zeros(n, d);
    let mut out = Tensor2D::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    let (g, b) = (scale.as_slice(), bias.as_slice());
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        let xh = xhat.row(r);
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = xh[c] * g[c] + b[c];
        }
    }
    (out, NormCache { xhat, rstd })
}

fn layer_norm_backward(
    dout: &Tensor2D,
    cache: &NormCache,
    scale: &Tensor2D,
    dscale: &mut Tensor2D,
    dbias: &mut Tensor2D,
) -> Tensor2D {
    let (n, d) = dout.shape();
    let g = scale.as_slice();
    let mut dx = Tensor2D::zeros(n, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let dy = dout.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..d {
            dscale.as_mut_slice()[c] += dy[c] * xh[c];
            dbias.as_mut_slice()[c] += dy[c];
            dxhat[c] = dy[c] * g[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let rs = cache.rstd[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = rs * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
