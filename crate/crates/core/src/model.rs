//! Transformer encoder with hand-written backward passes.
//!
//! Post-LayerNorm blocks in the BERT layout: learned token and position
//! embeddings, multi-head self-attention, a GELU feed-forward sublayer, an
//! MLM head whose output projection is tied to the token embeddings, and a
//! single linear classification head over the first position.
//!
//! Sequences are processed one at a time at their own length, so there is no
//! padding and no attention mask. All arithmetic is `f64`.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

const INIT_STD: f64 = 0.02;
const PARAM_MAGIC: &[u8; 8] = b"DAPTPRM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// BERT-base geometry.
    pub fn base(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            hidden: 768,
            layers: 12,
            heads: 12,
            intermediate: 3072,
            max_positions: 512,
            layer_norm_eps: 1e-12,
        }
    }

    /// 2 layers, hidden 64, 2 heads.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            hidden: 64,
            layers: 2,
            heads: 2,
            intermediate: 256,
            max_positions: 128,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("intermediate", self.intermediate),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("encoder {name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !self.layer_norm_eps.is_finite() || self.layer_norm_eps <= 0.0 {
            return Err(Error::invalid("layer_norm_eps must be positive"));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Ordered access to every trainable tensor.
pub trait ParamSet: Clone {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>);

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.collect_params_mut(&mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.params_mut() {
            t.fill(0.0);
        }
        z
    }

    fn add_assign(&mut self, other: &Self) {
        let theirs = other.params();
        for (mine, (_, t)) in self.params_mut().into_iter().zip(theirs) {
            *mine += t;
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.params_mut() {
            t.mapv_inplace(|x| x * factor);
        }
    }

    fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

fn normal_tensor<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).unwrap();
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Tensor,
    /// `1 × out`
    pub bias: Tensor,
}

impl Linear {
    fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Linear {
            weight: normal_tensor(inputs, outputs, rng),
            bias: Array2::zeros((1, outputs)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates into `grad` and returns the input gradient.
    fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Linear) -> Tensor {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl ParamSet for Linear {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}weight"), &self.weight));
        out.push((format!("{prefix}bias"), &self.bias));
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

struct NormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    fn new(width: usize) -> Self {
        LayerNorm {
            gamma: Array2::ones((1, width)),
            beta: Array2::zeros((1, width)),
        }
    }

    fn forward(&self, x: &Tensor, eps: f64) -> (Tensor, NormCache) {
        let width = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in normalized.rows_mut() {
            let mean = row.sum() / width;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / width;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            inv_std.push(inv);
        }
        let y = &normalized * &self.gamma + &self.beta;
        (y, NormCache { normalized, inv_std })
    }

    fn backward(&self, cache: &NormCache, dy: &Tensor, grad: &mut LayerNorm) -> Tensor {
        grad.gamma += &(dy * &cache.normalized).sum_axis(Axis(0)).insert_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let width = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
            let g = dxhat.row(i);
            let xh = cache.normalized.row(i);
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            let inv = cache.inv_std[i];
            Zip::from(&mut row).and(&g).and(&xh).for_each(|d, &gv, &xv| {
                *d = inv / width * (width * gv - sum_g - xv * sum_gx);
            });
        }
        dx
    }
}

impl ParamSet for LayerNorm {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}gamma"), &self.gamma));
        out.push((format!("{prefix}beta"), &self.beta));
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(m: &mut Tensor) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Log-softmax of one row of scores, numerically stable.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub attn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
}

struct LayerCache {
    input: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    context: Tensor,
    attn_norm: NormCache,
    mid: Tensor,
    pre_act: Tensor,
    act: Tensor,
    ffn_norm: NormCache,
}

impl EncoderLayer {
    fn init<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let h = cfg.hidden;
        EncoderLayer {
            query: Linear::init(h, h, rng),
            key: Linear::init(h, h, rng),
            value: Linear::init(h, h, rng),
            attn_out: Linear::init(h, h, rng),
            attn_norm: LayerNorm::new(h),
            ffn_in: Linear::init(h, cfg.intermediate, rng),
            ffn_out: Linear::init(cfg.intermediate, h, rng),
            ffn_norm: LayerNorm::new(h),
        }
    }

    fn forward(&self, x: &Tensor, cfg: &EncoderConfig) -> (Tensor, LayerCache) {
        let d = cfg.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let mut context = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let cols = s![.., h * d..(h + 1) * d];
            let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut p);
            context.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let attended = self.attn_out.forward(&context) + x;
        let (mid, attn_norm) = self.attn_norm.forward(&attended, cfg.layer_norm_eps);
        let pre_act = self.ffn_in.forward(&mid);
        let act = pre_act.mapv(gelu);
        let fed = self.ffn_out.forward(&act) + &mid;
        let (out, ffn_norm) = self.ffn_norm.forward(&fed, cfg.layer_norm_eps);
        (
            out,
            LayerCache {
                input: x.clone(),
                q,
                k,
                v,
                probs,
                context,
                attn_norm,
                mid,
                pre_act,
                act,
                ffn_norm,
            },
        )
    }

    fn backward(&self, c: &LayerCache, d_out: &Tensor, cfg: &EncoderConfig, g: &mut EncoderLayer) -> Tensor {
        let d_fed = self.ffn_norm.backward(&c.ffn_norm, d_out, &mut g.ffn_norm);
        let d_act = self.ffn_out.backward(&c.act, &d_fed, &mut g.ffn_out);
        let d_pre = &d_act * &c.pre_act.mapv(gelu_grad);
        let d_mid = self.ffn_in.backward(&c.mid, &d_pre, &mut g.ffn_in) + &d_fed;

        let d_attended = self.attn_norm.backward(&c.attn_norm, &d_mid, &mut g.attn_norm);
        let d_context = self.attn_out.backward(&c.context, &d_attended, &mut g.attn_out);

        let d = cfg.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, p) in c.probs.iter().enumerate() {
            let cols = s![.., h * d..(h + 1) * d];
            let d_ctx = d_context.slice(cols);
            let d_p = d_ctx.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_ctx));
            let mut d_scores = p * &d_p;
            for (mut row, prow) in d_scores.rows_mut().into_iter().zip(p.rows()) {
                let dot = row.sum();
                Zip::from(&mut row).and(&prow).for_each(|v, &pv| *v -= pv * dot);
            }
            d_scores.mapv_inplace(|v| v * scale);
            dq.slice_mut(cols).assign(&d_scores.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&d_scores.t().dot(&c.q.slice(cols)));
        }
        let mut dx = d_attended;
        dx += &self.query.backward(&c.input, &dq, &mut g.query);
        dx += &self.key.backward(&c.input, &dk, &mut g.key);
        dx += &self.value.backward(&c.input, &dv, &mut g.value);
        dx
    }
}

impl ParamSet for EncoderLayer {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.query.collect_params(&format!("{prefix}query."), out);
        self.key.collect_params(&format!("{prefix}key."), out);
        self.value.collect_params(&format!("{prefix}value."), out);
        self.attn_out.collect_params(&format!("{prefix}attn_out."), out);
        self.attn_norm.collect_params(&format!("{prefix}attn_norm."), out);
        self.ffn_in.collect_params(&format!("{prefix}ffn_in."), out);
        self.ffn_out.collect_params(&format!("{prefix}ffn_out."), out);
        self.ffn_norm.collect_params(&format!("{prefix}ffn_norm."), out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.query.collect_params_mut(out);
        self.key.collect_params_mut(out);
        self.value.collect_params_mut(out);
        self.attn_out.collect_params_mut(out);
        self.attn_norm.collect_params_mut(out);
        self.ffn_in.collect_params_mut(out);
        self.ffn_out.collect_params_mut(out);
        self.ffn_norm.collect_params_mut(out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    /// `vocab × hidden`, shared with the MLM output projection.
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub embedding_norm: LayerNorm,
    pub layers: Vec<EncoderLayer>,
}

pub struct EncoderCache {
    ids: Vec<u32>,
    embedding_norm: NormCache,
    layers: Vec<LayerCache>,
}

impl Encoder {
    pub fn init<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Encoder {
            token_embedding: normal_tensor(config.vocab_size, config.hidden, rng),
            position_embedding: normal_tensor(config.max_positions, config.hidden, rng),
            embedding_norm: LayerNorm::new(config.hidden),
            layers: (0..config.layers).map(|_| EncoderLayer::init(&config, rng)).collect(),
            config,
        })
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() || ids.len() > self.config.max_positions {
            return Err(Error::invalid(format!(
                "sequence length {} outside 1..={}",
                ids.len(),
                self.config.max_positions
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Final hidden states, `len × hidden`.
    pub fn forward(&self, ids: &[u32]) -> Result<(Tensor, EncoderCache)> {
        self.check_ids(ids)?;
        let mut x = Array2::zeros((ids.len(), self.config.hidden));
        for (t, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(t);
            row += &self.token_embedding.row(id as usize);
            row += &self.position_embedding.row(t);
        }
        let (mut h, embedding_norm) = self.embedding_norm.forward(&x, self.config.layer_norm_eps);
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, cache) = layer.forward(&h, &self.config);
            layers.push(cache);
            h = out;
        }
        Ok((
            h,
            EncoderCache {
                ids: ids.to_vec(),
                embedding_norm,
                layers,
            },
        ))
    }

    pub fn backward(&self, cache: &EncoderCache, d_hidden: Tensor, grad: &mut Encoder) {
        let mut d = d_hidden;
        for ((layer, c), g) in self.layers.iter().zip(&cache.layers).zip(grad.layers.iter_mut()).rev() {
            d = layer.backward(c, &d, &self.config, g);
        }
        let d_x = self.embedding_norm.backward(&cache.embedding_norm, &d, &mut grad.embedding_norm);
        for (t, &id) in cache.ids.iter().enumerate() {
            let mut tok = grad.token_embedding.row_mut(id as usize);
            tok += &d_x.row(t);
            let mut pos = grad.position_embedding.row_mut(t);
            pos += &d_x.row(t);
        }
    }
}

impl ParamSet for Encoder {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}token_embedding"), &self.token_embedding));
        out.push((format!("{prefix}position_embedding"), &self.position_embedding));
        self.embedding_norm.collect_params(&format!("{prefix}embedding_norm."), out);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.collect_params(&format!("{prefix}layer{i}."), out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.token_embedding);
        out.push(&mut self.position_embedding);
        self.embedding_norm.collect_params_mut(out);
        for layer in &mut self.layers {
            layer.collect_params_mut(out);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmHead {
    pub transform: Linear,
    pub norm: LayerNorm,
    /// `1 × vocab`
    pub output_bias: Tensor,
}

struct MlmHeadCache {
    input: Tensor,
    pre_act: Tensor,
    norm: NormCache,
    normed: Tensor,
}

impl MlmHead {
    fn init<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        MlmHead {
            transform: Linear::init(cfg.hidden, cfg.hidden, rng),
            norm: LayerNorm::new(cfg.hidden),
            output_bias: Array2::zeros((1, cfg.vocab_size)),
        }
    }

    fn forward(&self, rows: Tensor, embedding: &Tensor, eps: f64) -> (Tensor, MlmHeadCache) {
        let pre_act = self.transform.forward(&rows);
        let act = pre_act.mapv(gelu);
        let (normed, norm) = self.norm.forward(&act, eps);
        let logits = normed.dot(&embedding.t()) + &self.output_bias;
        (
            logits,
            MlmHeadCache {
                input: rows,
                pre_act,
                norm,
                normed,
            },
        )
    }

    fn backward(
        &self,
        c: &MlmHeadCache,
        d_logits: &Tensor,
        embedding: &Tensor,
        grad: &mut MlmHead,
        grad_embedding: &mut Tensor,
    ) -> Tensor {
        grad.output_bias += &d_logits.sum_axis(Axis(0)).insert_axis(Axis(0));
        general_mat_mul(1.0, &d_logits.t(), &c.normed, 1.0, grad_embedding);
        let d_normed = d_logits.dot(embedding);
        let d_act = self.norm.backward(&c.norm, &d_normed, &mut grad.norm);
        let d_pre = &d_act * &c.pre_act.mapv(gelu_grad);
        self.transform.backward(&c.input, &d_pre, &mut grad.transform)
    }
}

impl ParamSet for MlmHead {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.transform.collect_params(&format!("{prefix}transform."), out);
        self.norm.collect_params(&format!("{prefix}norm."), out);
        out.push((format!("{prefix}output_bias"), &self.output_bias));
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.transform.collect_params_mut(out);
        self.norm.collect_params_mut(out);
        out.push(&mut self.output_bias);
    }
}

/// Encoder plus MLM head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmModel {
    pub encoder: Encoder,
    pub head: MlmHead,
}

/// One sequence's contribution: summed cross-entropy and labeled count.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSum {
    pub total: f64,
    pub count: usize,
}

impl LossSum {
    pub fn add(&mut self, other: LossSum) {
        self.total += other.total;
        self.count += other.count;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total / self.count as f64
        }
    }
}

impl MlmModel {
    pub fn init<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::init(config, rng)?;
        let head = MlmHead::init(&encoder.config, rng);
        Ok(MlmModel { encoder, head })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    /// Vocabulary scores at the requested positions, `positions × vocab`.
    pub fn logits_at(&self, ids: &[u32], positions: &[usize]) -> Result<Tensor> {
        let (hidden, _) = self.encoder.forward(ids)?;
        let rows = gather_rows(&hidden, positions)?;
        Ok(self
            .head
            .forward(rows, &self.encoder.token_embedding, self.config().layer_norm_eps)
            .0)
    }

    /// Vocabulary scores at every position, `len × vocab`.
    pub fn logits(&self, ids: &[u32]) -> Result<Tensor> {
        let all: Vec<usize> = (0..ids.len()).collect();
        self.logits_at(ids, &all)
    }

    /// Cross-entropy summed over `targets` (position, gold id), with the
    /// gradient of that sum accumulated into `grad`.
    pub fn accumulate_gradient(
        &self,
        ids: &[u32],
        targets: &[(usize, u32)],
        grad: &mut MlmModel,
    ) -> Result<LossSum> {
        if targets.is_empty() {
            return Ok(LossSum::default());
        }
        let (hidden, cache) = self.encoder.forward(ids)?;
        let positions: Vec<usize> = targets.iter().map(|&(p, _)| p).collect();
        let rows = gather_rows(&hidden, &positions)?;
        let (logits, head_cache) =
            self.head
                .forward(rows, &self.encoder.token_embedding, self.config().layer_norm_eps);
        let mut d_logits = logits;
        let mut total = 0.0;
        for (mut row, &(_, gold)) in d_logits.rows_mut().into_iter().zip(targets) {
            let logp = log_softmax(row.as_slice().unwrap());
            total -= logp[gold as usize];
            for (d, lp) in row.iter_mut().zip(&logp) {
                *d = lp.exp();
            }
            row[gold as usize] -= 1.0;
        }
        let d_rows = self.head.backward(
            &head_cache,
            &d_logits,
            &self.encoder.token_embedding,
            &mut grad.head,
            &mut grad.encoder.token_embedding,
        );
        let mut d_hidden = Array2::zeros(hidden.raw_dim());
        for (r, &p) in positions.iter().enumerate() {
            let mut row = d_hidden.row_mut(p);
            row += &d_rows.row(r);
        }
        self.encoder.backward(&cache, d_hidden, &mut grad.encoder);
        Ok(LossSum {
            total,
            count: targets.len(),
        })
    }
}

impl ParamSet for MlmModel {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.encoder.collect_params(&format!("{prefix}encoder."), out);
        self.head.collect_params(&format!("{prefix}mlm_head."), out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.encoder.collect_params_mut(out);
        self.head.collect_params_mut(out);
    }
}

fn gather_rows(hidden: &Tensor, positions: &[usize]) -> Result<Tensor> {
    if let Some(&bad) = positions.iter().find(|&&p| p >= hidden.nrows()) {
        return Err(Error::invalid(format!("position {bad} outside sequence of {}", hidden.nrows())));
    }
    Ok(hidden.select(Axis(0), positions))
}

/// Encoder plus a two-way linear head on the first position.
/// Class 0 is negative, class 1 positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierNet {
    pub encoder: Encoder,
    pub head: Linear,
}

impl ClassifierNet {
    pub fn new<R: Rng>(encoder: Encoder, rng: &mut R) -> Self {
        let head = Linear::init(encoder.config.hidden, 2, rng);
        ClassifierNet { encoder, head }
    }

    /// `[negative, positive]` scores.
    pub fn logits(&self, ids: &[u32]) -> Result<[f64; 2]> {
        let (hidden, _) = self.encoder.forward(ids)?;
        let out = self.head.forward(&hidden.slice(s![0..1, ..]).to_owned());
        Ok([out[[0, 0]], out[[0, 1]]])
    }

    /// Cross-entropy for one example with its gradient added to `grad`.
    pub fn accumulate_gradient(&self, ids: &[u32], class: usize, grad: &mut ClassifierNet) -> Result<f64> {
        let (hidden, cache) = self.encoder.forward(ids)?;
        let first = hidden.slice(s![0..1, ..]).to_owned();
        let out = self.head.forward(&first);
        let logp = log_softmax(out.as_slice().unwrap());
        let mut d_out = Array2::from_shape_vec((1, 2), logp.iter().map(|v| v.exp()).collect()).unwrap();
        d_out[[0, class]] -= 1.0;
        let d_first = self.head.backward(&first, &d_out, &mut grad.head);
        let mut d_hidden = Array2::zeros(hidden.raw_dim());
        d_hidden.row_mut(0).assign(&d_first.row(0));
        self.encoder.backward(&cache, d_hidden, &mut grad.encoder);
        Ok(-logp[class])
    }
}

impl ParamSet for ClassifierNet {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.encoder.collect_params(&format!("{prefix}encoder."), out);
        self.head.collect_params(&format!("{prefix}cls_head."), out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.encoder.collect_params_mut(out);
        self.head.collect_params_mut(out);
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` (the schedule lives with the caller).
    pub fn update<P: ParamSet>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let grads = grads.params();
        let params = params.params_mut();
        if self.first.is_empty() {
            self.first = grads.iter().map(|(_, g)| Array2::zeros(g.raw_dim())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (((p, (_, g)), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Binary parameter file: magic, tensor count, then per tensor
/// name, rows, cols and little-endian `f64` data.
pub fn write_params<P: ParamSet, W: Write>(model: &P, mut out: W) -> std::io::Result<()> {
    let params = model.params();
    out.write_all(PARAM_MAGIC)?;
    out.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, t) in params {
        out.write_u16::<LittleEndian>(name.len() as u16)?;
        out.write_all(name.as_bytes())?;
        out.write_u32::<LittleEndian>(t.nrows() as u32)?;
        out.write_u32::<LittleEndian>(t.ncols() as u32)?;
        for &x in t.iter() {
            out.write_f64::<LittleEndian>(x)?;
        }
    }
    out.flush()
}

/// Loads tensors into `model`, whose structure must match the file exactly.
pub fn read_params<P: ParamSet, R: Read>(model: &mut P, mut input: R) -> Result<()> {
    let bad = |d: String| Error::format("parameter file", d);
    let io = |e: std::io::Error| bad(e.to_string());
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != PARAM_MAGIC {
        return Err(bad("wrong magic".into()));
    }
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let count = input.read_u32::<LittleEndian>().map_err(io)? as usize;
    if count != names.len() {
        return Err(bad(format!("expected {} tensors, found {count}", names.len())));
    }
    for (expected, t) in names.iter().zip(model.params_mut()) {
        let len = input.read_u16::<LittleEndian>().map_err(io)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name).map_err(io)?;
        if name != expected.as_bytes() {
            return Err(bad(format!("expected tensor {expected}, found {}", String::from_utf8_lossy(&name))));
        }
        let rows = input.read_u32::<LittleEndian>().map_err(io)? as usize;
        let cols = input.read_u32::<LittleEndian>().map_err(io)? as usize;
        if (rows, cols) != t.dim() {
            return Err(bad(format!("tensor {expected}: shape {rows}x{cols} vs {:?}", t.dim())));
        }
        for x in t.iter_mut() {
            *x = input.read_f64::<LittleEndian>().map_err(io)?;
        }
    }
    Ok(())
}
