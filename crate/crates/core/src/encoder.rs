//! Compact pre-norm transformer encoder with a classifier head on the [CLS]
//! position and an LM head tied to the input embeddings.
//!
//! ```text
//! ids -> sqrt(d)*E[id] + PE -> [LN -> MHA -> +] -> [LN -> FFN(gelu) -> +] x layers -> LN -> h
//!   h[0] -> W_c h + b_c          (class logits)
//!   h[i] -> E h[i] + b_lm        (vocab logits)
//! ```
//!
//! Gradients are computed by an explicit backward pass over a forward cache.
//! Everything runs in f64.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, BatchRepresentations, LossFlags};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale defaults: 2 layers, d=64, 4 heads, ffn 128, max_len 64.
    pub fn new(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            vocab_size,
            max_len: 64,
            model_dim: 64,
            num_heads: 4,
            num_layers: 2,
            ffn_dim: 128,
            num_classes,
            dropout: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("ffn_dim", self.ffn_dim),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

const LAYER_TENSORS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1",
    "b1", "w2", "b2",
];

impl LayerParams {
    fn zeros(d: usize, f: usize) -> Self {
        let m = |r, c| Array2::zeros((r, c));
        let v = |n| Array1::zeros(n);
        Self {
            ln1_g: v(d),
            ln1_b: v(d),
            wq: m(d, d),
            bq: v(d),
            wk: m(d, d),
            bk: v(d),
            wv: m(d, d),
            bv: v(d),
            wo: m(d, d),
            bo: v(d),
            ln2_g: v(d),
            ln2_b: v(d),
            w1: m(d, f),
            b1: v(f),
            w2: m(f, d),
            b2: v(d),
        }
    }

    fn slices(&self) -> [&[f64]; 16] {
        fn sl(a: &Array2<f64>) -> &[f64] {
            a.as_slice().unwrap()
        }
        fn sv(a: &Array1<f64>) -> &[f64] {
            a.as_slice().unwrap()
        }
        [
            sv(&self.ln1_g),
            sv(&self.ln1_b),
            sl(&self.wq),
            sv(&self.bq),
            sl(&self.wk),
            sv(&self.bk),
            sl(&self.wv),
            sv(&self.bv),
            sl(&self.wo),
            sv(&self.bo),
            sv(&self.ln2_g),
            sv(&self.ln2_b),
            sl(&self.w1),
            sv(&self.b1),
            sl(&self.w2),
            sv(&self.b2),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 16] {
        let LayerParams {
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
        } = self;
        [
            ln1_g.as_slice_mut().unwrap(),
            ln1_b.as_slice_mut().unwrap(),
            wq.as_slice_mut().unwrap(),
            bq.as_slice_mut().unwrap(),
            wk.as_slice_mut().unwrap(),
            bk.as_slice_mut().unwrap(),
            wv.as_slice_mut().unwrap(),
            bv.as_slice_mut().unwrap(),
            wo.as_slice_mut().unwrap(),
            bo.as_slice_mut().unwrap(),
            ln2_g.as_slice_mut().unwrap(),
            ln2_b.as_slice_mut().unwrap(),
            w1.as_slice_mut().unwrap(),
            b1.as_slice_mut().unwrap(),
            w2.as_slice_mut().unwrap(),
            b2.as_slice_mut().unwrap(),
        ]
    }
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
    pub lm_b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Params {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let (v, d, f, m) = (
            config.vocab_size,
            config.model_dim,
            config.ffn_dim,
            config.num_classes,
        );
        Self {
            tok_emb: Array2::zeros((v, d)),
            layers: (0..config.num_layers).map(|_| LayerParams::zeros(d, f)).collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            cls_w: Array2::zeros((d, m)),
            cls_b: Array1::zeros(m),
            lm_b: Array1::zeros(v),
        }
    }

    /// Names and shapes, in the order of [`Params::slices`].
    pub fn layout(config: &EncoderConfig) -> Vec<TensorInfo> {
        let (v, d, f, m) = (
            config.vocab_size,
            config.model_dim,
            config.ffn_dim,
            config.num_classes,
        );
        let info = |name: String, shape: Vec<usize>| TensorInfo { name, shape };
        let mut out = vec![info("tok_emb".into(), vec![v, d])];
        for l in 0..config.num_layers {
            let shapes = [
                vec![d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
            ];
            for (name, shape) in LAYER_TENSORS.iter().zip(shapes) {
                out.push(info(format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(info("lnf_g".into(), vec![d]));
        out.push(info("lnf_b".into(), vec![d]));
        out.push(info("cls_w".into(), vec![d, m]));
        out.push(info("cls_b".into(), vec![m]));
        out.push(info("lm_b".into(), vec![v]));
        out
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.tok_emb.as_slice().unwrap()];
        for l in &self.layers {
            out.extend(l.slices());
        }
        out.push(self.lnf_g.as_slice().unwrap());
        out.push(self.lnf_b.as_slice().unwrap());
        out.push(self.cls_w.as_slice().unwrap());
        out.push(self.cls_b.as_slice().unwrap());
        out.push(self.lm_b.as_slice().unwrap());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let Params {
            tok_emb,
            layers,
            lnf_g,
            lnf_b,
            cls_w,
            cls_b,
            lm_b,
        } = self;
        let mut out = vec![tok_emb.as_slice_mut().unwrap()];
        for l in layers.iter_mut() {
            out.extend(l.slices_mut());
        }
        out.push(lnf_g.as_slice_mut().unwrap());
        out.push(lnf_b.as_slice_mut().unwrap());
        out.push(cls_w.as_slice_mut().unwrap());
        out.push(cls_b.as_slice_mut().unwrap());
        out.push(lm_b.as_slice_mut().unwrap());
        out
    }

    pub fn num_values(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// `self += other * scale`
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y * scale;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: Params,
    positional: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Classify,
    Lm,
}

/// Outputs of one forward pass over a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Last-layer hidden states (after the final norm), L x d.
    pub hidden: Array2<f64>,
    pub class_logits: Vec<f64>,
    /// L x V, present in LM mode.
    pub lm_logits: Option<Array2<f64>>,
    /// Attention probabilities per layer, each `heads` matrices of L x L.
    pub layer_attention: Vec<Vec<Array2<f64>>>,
    /// Hidden state at the [CLS] position.
    pub pooled: Vec<f64>,
}

impl ForwardTrace {
    pub fn last_attention(&self) -> &[Array2<f64>] {
        self.layer_attention.last().expect("at least one layer")
    }
}

pub fn sinusoidal_positions(max_len: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((max_len, dim));
    for pos in 0..max_len {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (rows, d) = x.dim();
    let mut xhat = Array2::zeros((rows, d));
    let mut inv_std = Array1::zeros(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            xhat[[r, c]] = (row[c] - mean) * is;
        }
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let (rows, d) = dy.dim();
    let mut dx = Array2::zeros((rows, d));
    for r in 0..rows {
        let dxh = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let mean_d = dxh.sum() / d as f64;
        let mean_dx = dxh.dot(&xh) / d as f64;
        let is = cache.inv_std[r];
        for c in 0..d {
            dx[[r, c]] = is * (dxh[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

fn linear_backward(
    x: &Array2<f64>,
    dy: &Array2<f64>,
    w: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, dw);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn((rows, cols), |_| if rng.gen::<f64>() < p { 0.0 } else { keep })
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ln2: LnCache,
    b: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    /// Final normalized hidden states, L x d.
    pub hidden: Array2<f64>,
}

impl ForwardCache {
    pub fn pooled(&self) -> ArrayView1<'_, f64> {
        self.hidden.row(0)
    }

    fn attention(&self) -> Vec<Vec<Array2<f64>>> {
        self.layers.iter().map(|l| l.probs.clone()).collect()
    }
}

/// A classification example: framed ids and class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifyExample {
    pub ids: Vec<u32>,
    pub label: usize,
}

/// A masked-LM example: corrupted input ids and the (position, original id)
/// pairs that are supervised.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedLmExample {
    pub ids: Vec<u32>,
    pub targets: Vec<(usize, u32)>,
}

/// One original with its pseudo samples (which inherit its label).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseResistantGroup {
    pub original: ClassifyExample,
    pub pseudo: Vec<ClassifyExample>,
}

pub enum Batch<'a> {
    Classify(&'a [ClassifyExample]),
    MaskedLm(&'a [MaskedLmExample]),
    NoiseResistant {
        groups: &'a [NoiseResistantGroup],
        tau: f64,
        flags: LossFlags,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Params,
    /// Contrastive term, noise-resistant objective only.
    pub contrastive: f64,
    /// Cross-entropy term (the whole loss for the plain objectives).
    pub cross_entropy: f64,
    /// Argmax-correct originals, classification objectives only.
    pub correct: usize,
    pub counted: usize,
}

impl EncoderModel {
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(config.seed, "encoder-init", &[]);
        let mut params = Params::zeros(&config);
        let layout = Params::layout(&config);
        let d = config.model_dim as f64;
        for (info, slice) in layout.iter().zip(params.slices_mut()) {
            let leaf = info.name.rsplit('.').next().unwrap();
            if leaf == "tok_emb" {
                let a = (3.0 / d).sqrt();
                slice.iter_mut().for_each(|x| *x = rng.gen_range(-a..a));
            } else if leaf.ends_with("_g") {
                slice.fill(1.0);
            } else if info.shape.len() == 2 {
                let a = 1.0 / (info.shape[0] as f64).sqrt();
                slice.iter_mut().for_each(|x| *x = rng.gen_range(-a..a));
            }
        }
        Ok(Self::from_params(config, params))
    }

    pub fn from_params(config: EncoderConfig, params: Params) -> Self {
        let positional = sinusoidal_positions(config.max_len, config.model_dim);
        Self {
            config,
            params,
            positional,
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Invalid("empty input sequence".into()));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::Truncation {
                len: ids.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::InvalidTokenId(bad));
        }
        Ok(())
    }

    /// Runs the encoder body. Dropout is active iff `dropout_rng` is given and
    /// the configured rate is positive.
    pub fn forward_cached<R: Rng + ?Sized>(
        &self,
        ids: &[u32],
        mut dropout_rng: Option<&mut R>,
    ) -> Result<ForwardCache> {
        self.check_ids(ids)?;
        let cfg = &self.config;
        let (len, d, heads, hd) = (ids.len(), cfg.model_dim, cfg.num_heads, cfg.head_dim());
        let p = cfg.dropout;
        let emb_scale = (d as f64).sqrt();
        let mut x = Array2::zeros((len, d));
        for (i, &id) in ids.iter().enumerate() {
            let row = &self.params.tok_emb.row(id as usize) * emb_scale + &self.positional.row(i);
            x.row_mut(i).assign(&row);
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for lp in &self.params.layers {
            let (a, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
            let q = linear(&a, &lp.wq, &lp.bq);
            let k = linear(&a, &lp.wk, &lp.bk);
            let v = linear(&a, &lp.wv, &lp.bv);
            let mut ctx = Array2::zeros((len, d));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * hd..(h + 1) * hd];
                let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                softmax_rows(&mut sc);
                ctx.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
                probs.push(sc);
            }
            let mut o = linear(&ctx, &lp.wo, &lp.bo);
            let attn_mask = match dropout_rng.as_deref_mut() {
                Some(r) if p > 0.0 => {
                    let m = dropout_mask(len, d, p, r);
                    o *= &m;
                    Some(m)
                }
                _ => None,
            };
            x += &o;
            let (b, ln2) = layer_norm(&x, &lp.ln2_g, &lp.ln2_b);
            let u = linear(&b, &lp.w1, &lp.b1);
            let g = u.mapv(gelu);
            let mut y = linear(&g, &lp.w2, &lp.b2);
            let ffn_mask = match dropout_rng.as_deref_mut() {
                Some(r) if p > 0.0 => {
                    let m = dropout_mask(len, d, p, r);
                    y *= &m;
                    Some(m)
                }
                _ => None,
            };
            x += &y;
            layers.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                attn_mask,
                ln2,
                b,
                u,
                g,
                ffn_mask,
            });
        }
        let (hidden, lnf) = layer_norm(&x, &self.params.lnf_g, &self.params.lnf_b);
        Ok(ForwardCache {
            ids: ids.to_vec(),
            layers,
            lnf,
            hidden,
        })
    }

    pub fn class_logits(&self, pooled: ArrayView1<f64>) -> Vec<f64> {
        (pooled.dot(&self.params.cls_w) + &self.params.cls_b).to_vec()
    }

    /// Vocabulary logits at one position.
    pub fn lm_logits_at(&self, hidden: &Array2<f64>, pos: usize) -> Array1<f64> {
        self.params.tok_emb.dot(&hidden.row(pos)) + &self.params.lm_b
    }

    pub fn lm_logits(&self, hidden: &Array2<f64>) -> Array2<f64> {
        hidden.dot(&self.params.tok_emb.t()) + &self.params.lm_b
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        ids: &[u32],
        mode: HeadMode,
        train_mode: bool,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let cache = self.forward_cached(ids, if train_mode { Some(rng) } else { None })?;
        Ok(self.trace_from_cache(&cache, mode))
    }

    /// Eval-mode forward pass (dropout off).
    pub fn forward_eval(&self, ids: &[u32], mode: HeadMode) -> Result<ForwardTrace> {
        let cache = self.forward_cached::<rand_chacha::ChaCha8Rng>(ids, None)?;
        Ok(self.trace_from_cache(&cache, mode))
    }

    fn trace_from_cache(&self, cache: &ForwardCache, mode: HeadMode) -> ForwardTrace {
        let pooled = cache.pooled();
        ForwardTrace {
            class_logits: self.class_logits(pooled),
            lm_logits: (mode == HeadMode::Lm).then(|| self.lm_logits(&cache.hidden)),
            layer_attention: cache.attention(),
            pooled: pooled.to_vec(),
            hidden: cache.hidden.clone(),
        }
    }

    /// Backpropagates `dhidden` (gradient w.r.t. the final hidden states)
    /// through the encoder body, accumulating into `grads`.
    pub fn backward(&self, cache: &ForwardCache, dhidden: &Array2<f64>, grads: &mut Params) {
        let cfg = &self.config;
        let (len, d, heads, hd) = (cache.ids.len(), cfg.model_dim, cfg.num_heads, cfg.head_dim());
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dx = layer_norm_backward(
            dhidden,
            &cache.lnf,
            &self.params.lnf_g,
            &mut grads.lnf_g,
            &mut grads.lnf_b,
        );
        for (li, lc) in cache.layers.iter().enumerate().rev() {
            let lp = &self.params.layers[li];
            let lg = &mut grads.layers[li];
            // FFN branch
            let mut dy = dx.clone();
            if let Some(m) = &lc.ffn_mask {
                dy *= m;
            }
            let dg = linear_backward(&lc.g, &dy, &lp.w2, &mut lg.w2, &mut lg.b2);
            let mut du = dg;
            du.zip_mut_with(&lc.u, |g, &u| *g *= gelu_grad(u));
            let db = linear_backward(&lc.b, &du, &lp.w1, &mut lg.w1, &mut lg.b1);
            dx += &layer_norm_backward(&db, &lc.ln2, &lp.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b);
            // attention branch
            let mut do_ = dx.clone();
            if let Some(m) = &lc.attn_mask {
                do_ *= m;
            }
            let dctx = linear_backward(&lc.ctx, &do_, &lp.wo, &mut lg.wo, &mut lg.bo);
            let mut dq = Array2::zeros((len, d));
            let mut dk = Array2::zeros((len, d));
            let mut dv = Array2::zeros((len, d));
            for h in 0..heads {
                let cols = s![.., h * hd..(h + 1) * hd];
                let pr = &lc.probs[h];
                let dctx_h = dctx.slice(cols);
                let dp = dctx_h.dot(&lc.v.slice(cols).t());
                dv.slice_mut(cols).assign(&pr.t().dot(&dctx_h));
                let mut ds = dp;
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(pr.rows()) {
                    let dotp = drow.dot(&prow);
                    drow.zip_mut_with(&prow, |dv, &pv| *dv = pv * (*dv - dotp));
                }
                ds *= scale;
                dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
            }
            let mut da = linear_backward(&lc.a, &dq, &lp.wq, &mut lg.wq, &mut lg.bq);
            da += &linear_backward(&lc.a, &dk, &lp.wk, &mut lg.wk, &mut lg.bk);
            da += &linear_backward(&lc.a, &dv, &lp.wv, &mut lg.wv, &mut lg.bv);
            dx += &layer_norm_backward(&da, &lc.ln1, &lp.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b);
        }
        let emb_scale = (d as f64).sqrt();
        for (i, &id) in cache.ids.iter().enumerate() {
            let mut row = grads.tok_emb.row_mut(id as usize);
            row.scaled_add(emb_scale, &dx.row(i));
        }
    }

    /// Adds the classifier-head gradient for `dlogits` at the pooled position
    /// and returns the gradient w.r.t. the pooled representation.
    fn classifier_backward(
        &self,
        pooled: ArrayView1<f64>,
        dlogits: &[f64],
        grads: &mut Params,
    ) -> Array1<f64> {
        let dl = ArrayView1::from(dlogits);
        let outer = pooled
            .to_owned()
            .into_shape_with_order((pooled.len(), 1))
            .unwrap()
            .dot(&dl.into_shape_with_order((1, dlogits.len())).unwrap());
        grads.cls_w += &outer;
        grads.cls_b += &dl;
        self.params.cls_w.dot(&dl)
    }

    /// Mean loss over the batch and its gradient w.r.t. every parameter.
    /// Dropout is active iff `rng` is given.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        mut rng: Option<&mut R>,
    ) -> Result<LossOutput> {
        let mut grads = Params::zeros(&self.config);
        let d = self.config.model_dim;
        match batch {
            Batch::Classify(examples) => {
                if examples.is_empty() {
                    return Err(Error::Invalid("empty batch".into()));
                }
                let n = examples.len() as f64;
                let mut total = 0.0;
                let mut correct = 0;
                for ex in examples.iter() {
                    let cache = self.forward_cached(&ex.ids, rng.as_deref_mut())?;
                    let logits = self.class_logits(cache.pooled());
                    let (loss, mut dl) = losses::softmax_cross_entropy(&logits, ex.label);
                    correct += usize::from(losses::argmax(&logits) == ex.label);
                    total += loss;
                    dl.iter_mut().for_each(|g| *g /= n);
                    let dpooled = self.classifier_backward(cache.pooled(), &dl, &mut grads);
                    let mut dh = Array2::zeros(cache.hidden.dim());
                    dh.row_mut(0).assign(&dpooled);
                    self.backward(&cache, &dh, &mut grads);
                }
                let loss = total / n;
                Ok(LossOutput {
                    loss,
                    grads,
                    contrastive: 0.0,
                    cross_entropy: loss,
                    correct,
                    counted: examples.len(),
                })
            }
            Batch::MaskedLm(examples) => {
                let supervised: usize = examples.iter().map(|e| e.targets.len()).sum();
                if supervised == 0 {
                    return Err(Error::NoSupervisedPositions);
                }
                let n = supervised as f64;
                let mut total = 0.0;
                for ex in examples.iter().filter(|e| !e.targets.is_empty()) {
                    let cache = self.forward_cached(&ex.ids, rng.as_deref_mut())?;
                    let mut dh = Array2::zeros(cache.hidden.dim());
                    for &(pos, target) in &ex.targets {
                        if pos >= ex.ids.len() || target as usize >= self.config.vocab_size {
                            return Err(Error::Invalid(format!(
                                "bad masked target ({pos}, {target})"
                            )));
                        }
                        let logits = self.lm_logits_at(&cache.hidden, pos);
                        let (loss, mut dl) =
                            losses::softmax_cross_entropy(logits.as_slice().unwrap(), target as usize);
                        total += loss;
                        dl.iter_mut().for_each(|g| *g /= n);
                        let dl = Array1::from(dl);
                        // tied head: logits = E h + b
                        let h = cache.hidden.row(pos);
                        for (v, &g) in dl.iter().enumerate() {
                            if g != 0.0 {
                                grads.tok_emb.row_mut(v).scaled_add(g, &h);
                            }
                        }
                        grads.lm_b += &dl;
                        let dhp = self.params.tok_emb.t().dot(&dl);
                        let mut row = dh.row_mut(pos);
                        row += &dhp;
                    }
                    self.backward(&cache, &dh, &mut grads);
                }
                let loss = total / n;
                Ok(LossOutput {
                    loss,
                    grads,
                    contrastive: 0.0,
                    cross_entropy: loss,
                    correct: 0,
                    counted: 0,
                })
            }
            Batch::NoiseResistant { groups, tau, flags } => {
                if groups.is_empty() {
                    return Err(Error::Invalid("empty batch".into()));
                }
                let caches: Vec<ForwardCache> = groups
                    .iter()
                    .map(|g| self.forward_cached(&g.original.ids, rng.as_deref_mut()))
                    .collect::<Result<_>>()?;
                let reps: Vec<Vec<f64>> = caches.iter().map(|c| c.pooled().to_vec()).collect();
                let labels: Vec<usize> = groups.iter().map(|g| g.original.label).collect();
                let (contrastive, dreps) = if flags.use_nrt {
                    losses::contrastive_loss_with_grad(&reps, &labels, *tau)?
                } else {
                    (0.0, vec![vec![0.0; d]; reps.len()])
                };
                let n_ce: usize = groups
                    .iter()
                    .map(|g| 1 + if flags.use_da { g.pseudo.len() } else { 0 })
                    .sum();
                let n = n_ce as f64;
                let mut ce_total = 0.0;
                let mut correct = 0;
                for ((g, cache), drep) in groups.iter().zip(&caches).zip(&dreps) {
                    let logits = self.class_logits(cache.pooled());
                    let (loss, mut dl) = losses::softmax_cross_entropy(&logits, g.original.label);
                    correct += usize::from(losses::argmax(&logits) == g.original.label);
                    ce_total += loss;
                    dl.iter_mut().for_each(|x| *x /= n);
                    let mut dpooled = self.classifier_backward(cache.pooled(), &dl, &mut grads);
                    dpooled += &ArrayView1::from(drep.as_slice());
                    let mut dh = Array2::zeros(cache.hidden.dim());
                    dh.row_mut(0).assign(&dpooled);
                    self.backward(cache, &dh, &mut grads);
                }
                drop(caches);
                if flags.use_da {
                    for g in groups.iter() {
                        for ps in &g.pseudo {
                            let cache = self.forward_cached(&ps.ids, rng.as_deref_mut())?;
                            let logits = self.class_logits(cache.pooled());
                            let (loss, mut dl) =
                                losses::softmax_cross_entropy(&logits, g.original.label);
                            ce_total += loss;
                            dl.iter_mut().for_each(|x| *x /= n);
                            let dpooled = self.classifier_backward(cache.pooled(), &dl, &mut grads);
                            let mut dh = Array2::zeros(cache.hidden.dim());
                            dh.row_mut(0).assign(&dpooled);
                            self.backward(&cache, &dh, &mut grads);
                        }
                    }
                }
                let cross_entropy = ce_total / n;
                Ok(LossOutput {
                    loss: contrastive + cross_entropy,
                    grads,
                    contrastive,
                    cross_entropy,
                    correct,
                    counted: groups.len(),
                })
            }
        }
    }

    /// Loss only, via the same path (used by finite-difference checks).
    pub fn loss<R: Rng + ?Sized>(&self, batch: &Batch, rng: Option<&mut R>) -> Result<f64> {
        Ok(self.loss_and_grads(batch, rng)?.loss)
    }

    /// Pooled representations and class logits in eval mode.
    pub fn represent(&self, ids: &[u32]) -> Result<(Vec<f64>, Vec<f64>)> {
        let cache = self.forward_cached::<rand_chacha::ChaCha8Rng>(ids, None)?;
        Ok((cache.pooled().to_vec(), self.class_logits(cache.pooled())))
    }

    pub fn predict(&self, ids: &[u32]) -> Result<usize> {
        let (_, logits) = self.represent(ids)?;
        Ok(losses::argmax(&logits))
    }
}

/// Builds the batch representation view used by the loss oracles from a model.
pub fn batch_representations(
    model: &EncoderModel,
    groups: &[NoiseResistantGroup],
) -> Result<BatchRepresentations> {
    let mut reps = BatchRepresentations::default();
    for g in groups {
        let (h, logits) = model.represent(&g.original.ids)?;
        reps.representations.push(h);
        reps.labels.push(g.original.label);
        reps.original_logits.push(logits);
        let mut pl = Vec::with_capacity(g.pseudo.len());
        for p in &g.pseudo {
            pl.push(model.represent(&p.ids)?.1);
        }
        reps.pseudo_logits.push(pl);
    }
    Ok(reps)
}

/// AdamW with decoupled weight decay; decay applies to matrices only.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Params,
    pub second_moment: Params,
    pub step: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    decay_mask: Vec<bool>,
    names: Vec<String>,
}

impl OptimizerState {
    pub fn new(config: &EncoderConfig, learning_rate: f64, weight_decay: f64) -> Self {
        let layout = Params::layout(config);
        Self {
            first_moment: Params::zeros(config),
            second_moment: Params::zeros(config),
            step: 0,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_mask: layout.iter().map(|t| t.shape.len() == 2).collect(),
            names: layout.into_iter().map(|t| t.name).collect(),
        }
    }

    pub fn apply(&mut self, model: &mut EncoderModel, grads: &Params) -> Result<()> {
        let gs = grads.slices();
        if gs.len() != self.names.len() {
            return Err(Error::Shape("gradient layout differs from optimizer".into()));
        }
        for (name, g) in self.names.iter().zip(&gs) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr, wd) = (
            self.beta1,
            self.beta2,
            self.eps,
            self.learning_rate,
            self.weight_decay,
        );
        let ps = model.params.slices_mut();
        let ms = self.first_moment.slices_mut();
        let vs = self.second_moment.slices_mut();
        for ((((p, g), m), v), &decay) in ps
            .into_iter()
            .zip(gs)
            .zip(ms)
            .zip(vs)
            .zip(&self.decay_mask)
        {
            if p.len() != g.len() {
                return Err(Error::Shape("parameter/gradient length".into()));
            }
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                let decay_term = if decay { wd * p[i] } else { 0.0 };
                p[i] -= lr * (update + decay_term);
            }
        }
        Ok(())
    }
}

/// Deterministic view of a value slice for tests and checkpoints.
pub fn flatten(params: &Params) -> Vec<f64> {
    params.slices().concat()
}

pub fn view2(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("shape")
}
