use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{gelu, gelu_grad, layer_norm_backward, layer_norm_forward, softmax_rows_masked, LnCache};
use super::params::{push1, push1_mut, push2, push2_mut, Parameterized};
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_ln_eps")]
    pub layernorm_epsilon: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_ln_eps() -> f64 {
    1e-12
}

impl EncoderConfig {
    /// Desk-scale default: 4 layers, width 64.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            ff_dim: 256,
            max_seq_len: 64,
            vocab_size,
            layernorm_epsilon: 1e-12,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("{name} must be at least 1")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Invalid(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(self.layernorm_epsilon > 0.0) {
            return Err(Error::Invalid("layernorm_epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Affine map `y = x W + b` with `W` stored input × output.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub(crate) fn random(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        Self {
            weight: Array2::from_shape_simple_fn((input, output), || normal.sample(rng)),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns dx.
    pub(crate) fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        push2(&self.weight, out);
        push1(&self.bias, out);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        push2_mut(&mut self.weight, out);
        push1_mut(&mut self.bias, out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub(crate) fn forward(&self, x: &Array2<f64>, eps: f64) -> (Array2<f64>, LnCache) {
        layer_norm_forward(x, &self.gamma, &self.beta, eps)
    }

    pub(crate) fn backward(&self, dy: &Array2<f64>, cache: &LnCache, grad: &mut LayerNorm) -> Array2<f64> {
        let (dx, dg, db) = layer_norm_backward(dy, &self.gamma, cache);
        grad.gamma += &dg;
        grad.beta += &db;
        dx
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        push1(&self.gamma, out);
        push1(&self.beta, out);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        push1_mut(&mut self.gamma, out);
        push1_mut(&mut self.beta, out);
    }
}

/// Post-norm transformer block: self-attention, add & norm, GELU feed-forward, add & norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub attn_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    context: Array2<f64>,
    attn_norm: LnCache,
    mid: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ff_norm: LnCache,
}

impl EncoderLayer {
    fn random(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, f) = (cfg.hidden_dim, cfg.ff_dim);
        Self {
            query: Linear::random(d, d, rng),
            key: Linear::random(d, d, rng),
            value: Linear::random(d, d, rng),
            attn_out: Linear::random(d, d, rng),
            attn_norm: LayerNorm::new(d),
            ff_in: Linear::random(d, f, rng),
            ff_out: Linear::random(f, d, rng),
            ff_norm: LayerNorm::new(d),
        }
    }

    fn zeros(cfg: &EncoderConfig) -> Self {
        let (d, f) = (cfg.hidden_dim, cfg.ff_dim);
        Self {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            attn_out: Linear::zeros(d, d),
            attn_norm: LayerNorm::zeros(d),
            ff_in: Linear::zeros(d, f),
            ff_out: Linear::zeros(f, d),
            ff_norm: LayerNorm::zeros(d),
        }
    }

    fn forward(&self, x: &Array2<f64>, length: usize, heads: usize, eps: f64) -> (Array2<f64>, LayerCache) {
        let n = x.nrows();
        let d = x.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let mut context = Array2::zeros((n, d));
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows_masked(&mut scores, length);
            context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            attn.push(scores);
        }
        let residual = x + &self.attn_out.forward(&context);
        let (mid, attn_norm) = self.attn_norm.forward(&residual, eps);
        let ff_pre = self.ff_in.forward(&mid);
        let ff_act = ff_pre.mapv(gelu);
        let residual = &mid + &self.ff_out.forward(&ff_act);
        let (out, ff_norm) = self.ff_norm.forward(&residual, eps);
        let cache = LayerCache {
            input: x.clone(),
            q,
            k,
            v,
            attn,
            context,
            attn_norm,
            mid,
            ff_pre,
            ff_act,
            ff_norm,
        };
        (out, cache)
    }

    fn backward(&self, c: &LayerCache, dout: &Array2<f64>, heads: usize, g: &mut EncoderLayer) -> Array2<f64> {
        let d = dout.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let dres2 = self.ff_norm.backward(dout, &c.ff_norm, &mut g.ff_norm);
        let dact = self.ff_out.backward(&c.ff_act, &dres2, &mut g.ff_out);
        let mut dpre = dact;
        dpre.zip_mut_with(&c.ff_pre, |dp, &x| *dp *= gelu_grad(x));
        let dmid = dres2 + self.ff_in.backward(&c.mid, &dpre, &mut g.ff_in);

        let dres1 = self.attn_norm.backward(&dmid, &c.attn_norm, &mut g.attn_norm);
        let dcontext = self.attn_out.backward(&c.context, &dres1, &mut g.attn_out);

        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, a) in c.attn.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dch = dcontext.slice(cols);
            let da = dch.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dch));
            // Softmax Jacobian, row-wise: dS = A ∘ (dA − Σ_j dA·A).
            let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = a * &(da - &row_dot) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let mut dx = dres1;
        dx += &self.query.backward(&c.input, &dq, &mut g.query);
        dx += &self.key.backward(&c.input, &dk, &mut g.key);
        dx += &self.value.backward(&c.input, &dv, &mut g.value);
        dx
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        self.query.params(out);
        self.key.params(out);
        self.value.params(out);
        self.attn_out.params(out);
        self.attn_norm.params(out);
        self.ff_in.params(out);
        self.ff_out.params(out);
        self.ff_norm.params(out);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.query.params_mut(out);
        self.key.params_mut(out);
        self.value.params_mut(out);
        self.attn_out.params_mut(out);
        self.attn_norm.params_mut(out);
        self.ff_in.params_mut(out);
        self.ff_out.params_mut(out);
        self.ff_norm.params_mut(out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub embedding_norm: LayerNorm,
    pub layers: Vec<EncoderLayer>,
}

/// Everything the backward pass needs from one forward pass over a sequence.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    ids: Vec<usize>,
    embedding_norm: LnCache,
    layers: Vec<LayerCache>,
    /// Embedding output followed by one entry per layer, each seq_len × d.
    pub hidden: Vec<Array2<f64>>,
}

impl EncoderTrace {
    pub fn last(&self) -> &Array2<f64> {
        self.hidden.last().expect("at least the embedding output")
    }

    /// Attention probabilities of `layer` (1-based), one seq_len × seq_len matrix per head.
    pub fn attention(&self, layer: usize) -> &[Array2<f64>] {
        &self.layers[layer - 1].attn
    }
}

impl EncoderModel {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let (v, d) = (config.vocab_size, config.hidden_dim);
        let token_embedding = Array2::from_shape_simple_fn((v, d), || normal.sample(&mut rng));
        let position_embedding =
            Array2::from_shape_simple_fn((config.max_seq_len, d), || normal.sample(&mut rng));
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer::random(&config, &mut rng))
            .collect();
        Ok(Self {
            token_embedding,
            position_embedding,
            embedding_norm: LayerNorm::new(d),
            layers,
            config,
        })
    }

    /// Same shapes, every parameter zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let c = &self.config;
        Self {
            config: c.clone(),
            token_embedding: Array2::zeros(self.token_embedding.raw_dim()),
            position_embedding: Array2::zeros(self.position_embedding.raw_dim()),
            embedding_norm: LayerNorm::zeros(c.hidden_dim),
            layers: (0..c.num_layers).map(|_| EncoderLayer::zeros(c)).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    fn check_input(&self, ids: &[usize], length: usize) -> Result<()> {
        let max = self.config.max_seq_len;
        if ids.len() > max {
            return Err(Error::SequenceTooLong { len: ids.len(), max });
        }
        if ids.is_empty() || length == 0 || length > ids.len() {
            return Err(Error::Invalid(format!(
                "attention length {length} invalid for sequence of {} tokens",
                ids.len()
            )));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Hidden states for one sequence. Positions at or beyond `length` are
    /// padding: no position attends to them.
    pub fn forward(&self, ids: &[usize], length: usize) -> Result<Vec<Array2<f64>>> {
        Ok(self.forward_trace(ids, length)?.hidden)
    }

    pub fn forward_trace(&self, ids: &[usize], length: usize) -> Result<EncoderTrace> {
        self.check_input(ids, length)?;
        let eps = self.config.layernorm_epsilon;
        let n = ids.len();
        let mut emb = self.position_embedding.slice(s![..n, ..]).to_owned();
        for (mut row, &id) in emb.rows_mut().into_iter().zip(ids) {
            row += &self.token_embedding.row(id);
        }
        let (h0, embedding_norm) = self.embedding_norm.forward(&emb, eps);
        let mut hidden = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        hidden.push(h0);
        for layer in &self.layers {
            let (out, cache) = layer.forward(hidden.last().unwrap(), length, self.config.num_heads, eps);
            hidden.push(out);
            caches.push(cache);
        }
        Ok(EncoderTrace {
            ids: ids.to_vec(),
            embedding_norm,
            layers: caches,
            hidden,
        })
    }

    /// Gradient of the loss w.r.t. every parameter, given dLoss/d(last hidden state).
    pub fn backward(&self, trace: &EncoderTrace, d_last: &Array2<f64>) -> Self {
        let mut grad = self.zeros_like();
        self.backward_into(trace, d_last, &mut grad);
        grad
    }

    pub fn backward_into(&self, trace: &EncoderTrace, d_last: &Array2<f64>, grad: &mut Self) {
        let heads = self.config.num_heads;
        let mut dx = d_last.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            dx = layer.backward(&trace.layers[i], &dx, heads, &mut grad.layers[i]);
        }
        let demb = self
            .embedding_norm
            .backward(&dx, &trace.embedding_norm, &mut grad.embedding_norm);
        for (pos, (row, &id)) in demb.rows().into_iter().zip(&trace.ids).enumerate() {
            let mut t = grad.token_embedding.row_mut(id);
            t += &row;
            let mut p = grad.position_embedding.row_mut(pos);
            p += &row;
        }
    }
}

impl Parameterized for EncoderModel {
    fn params<'a>(&'a self, out: &mut Vec<&'a [f64]>) {
        push2(&self.token_embedding, out);
        push2(&self.position_embedding, out);
        self.embedding_norm.params(out);
        for l in &self.layers {
            l.params(out);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        push2_mut(&mut self.token_embedding, out);
        push2_mut(&mut self.position_embedding, out);
        self.embedding_norm.params_mut(out);
        for l in &mut self.layers {
            l.params_mut(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderModel {
        EncoderModel::new(EncoderConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            max_seq_len: 10,
            vocab_size: 12,
            layernorm_epsilon: 1e-12,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn output_has_one_entry_per_layer_plus_embedding() {
        let m = tiny();
        for n in 1..=6 {
            let ids: Vec<usize> = (0..n).map(|i| i % 12).collect();
            let hs = m.forward(&ids, n).unwrap();
            assert_eq!(hs.len(), 3);
            assert!(hs.iter().all(|h| h.dim() == (n, 8)));
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = tiny();
        let t = m.forward_trace(&[1, 2, 3, 4, 0], 3).unwrap();
        for layer in 1..=2 {
            for a in t.attention(layer) {
                for row in a.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                    assert_eq!(row[3], 0.0);
                    assert_eq!(row[4], 0.0);
                }
            }
        }
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let m = tiny();
        let base = m.forward(&[4, 5, 6], 3).unwrap();
        let padded = m.forward(&[4, 5, 6, 0, 0, 11], 3).unwrap();
        for (a, b) in base.iter().zip(&padded) {
            for i in 0..3 {
                for j in 0..8 {
                    assert!((a[[i, j]] - b[[i, j]]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn layer_norm_rows_standardized_before_affine() {
        let m = tiny();
        let t = m.forward_trace(&[1, 7, 3, 9], 4).unwrap();
        for cache in t.layers.iter().flat_map(|c| [&c.attn_norm, &c.ff_norm]) {
            for row in cache.xhat.rows() {
                let mean = row.sum() / 8.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = tiny();
        assert!(matches!(m.forward(&[12], 1), Err(Error::TokenOutOfRange { .. })));
        assert!(matches!(m.forward(&[1; 11], 11), Err(Error::SequenceTooLong { .. })));
        assert!(m.forward(&[1, 2], 3).is_err());
        assert!(m.forward(&[], 0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::toy(100);
        assert!(c.validate().is_ok());
        c.num_heads = 3;
        assert!(c.validate().is_err());
        c.num_heads = 4;
        c.num_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        assert_eq!(tiny().checksum(), tiny().checksum());
        let mut c = tiny().config;
        c.seed = 4;
        assert_ne!(EncoderModel::new(c).unwrap().checksum(), tiny().checksum());
    }
}
