use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::lora::{LoraGrads, LoraLayer};
use super::{dim_err, AdapterError};

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization without affine parameters.
/// Returns the normalized rows and each row's `1/σ`.
pub fn layer_norm(z: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = z.ncols() as f64;
    let mut y = z.to_owned();
    let mut inv_std = Array1::zeros(z.nrows());
    for (mut row, inv) in y.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    (y, inv_std)
}

fn layer_norm_backward(y: &Array2<f64>, inv_std: &Array1<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let d = y.ncols() as f64;
    let mut dz = Array2::zeros(y.dim());
    for i in 0..y.nrows() {
        let (yr, gr) = (y.row(i), dy.row(i));
        let mean_g = gr.sum() / d;
        let mean_gy = gr.dot(&yr) / d;
        let s = inv_std[i];
        for j in 0..y.ncols() {
            dz[[i, j]] = s * (gr[j] - mean_g - yr[j] * mean_gy);
        }
    }
    dz
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

pub(crate) fn glorot<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    gaussian(rng, rows, cols, (1.0 / cols as f64).sqrt())
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head self-attention sublayer `LN(X + MHA(X))`.
///
/// `W_K` and `W_O` are frozen. The Q and V projections are [`LoraLayer`]s,
/// which hold the block's only trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAttentionBlock {
    w_k: Array2<f64>,
    w_o: Array2<f64>,
    lora_q: LoraLayer,
    lora_v: LoraLayer,
    n_heads: usize,
    d_k: usize,
}

pub(crate) struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    y: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) struct AttentionGrads {
    pub q: LoraGrads,
    pub v: LoraGrads,
}

impl ToyAttentionBlock {
    pub fn new<R: Rng + ?Sized>(d_model: usize, n_heads: usize, rank: usize, rng: &mut R) -> Result<Self, AdapterError> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(AdapterError::Config(format!("d_model {d_model} is not divisible by {n_heads} heads")));
        }
        let w_q = glorot(rng, d_model, d_model);
        let w_k = glorot(rng, d_model, d_model);
        let w_v = glorot(rng, d_model, d_model);
        let w_o = glorot(rng, d_model, d_model);
        let lora_q = LoraLayer::new(w_q, rank, rng)?;
        let lora_v = LoraLayer::new(w_v, rank, rng)?;
        Ok(Self { w_k, w_o, lora_q, lora_v, n_heads, d_k: d_model / n_heads })
    }

    pub fn from_parts(
        lora_q: LoraLayer,
        w_k: Array2<f64>,
        lora_v: LoraLayer,
        w_o: Array2<f64>,
        n_heads: usize,
    ) -> Result<Self, AdapterError> {
        let d = w_k.nrows();
        if n_heads == 0 || d % n_heads != 0 {
            return Err(AdapterError::Config(format!("d_model {d} is not divisible by {n_heads} heads")));
        }
        for (name, shape) in [
            ("W_Q", lora_q.w().dim()),
            ("W_K", w_k.dim()),
            ("W_V", lora_v.w().dim()),
            ("W_O", w_o.dim()),
        ] {
            if shape != (d, d) {
                return Err(dim_err(format!("{name} of shape {d}x{d}"), format!("{shape:?}")));
            }
        }
        Ok(Self { w_k, w_o, lora_q, lora_v, n_heads, d_k: d / n_heads })
    }

    pub fn d_model(&self) -> usize {
        self.w_k.nrows()
    }
    pub fn n_heads(&self) -> usize {
        self.n_heads
    }
    pub fn d_k(&self) -> usize {
        self.d_k
    }
    pub fn lora_q(&self) -> &LoraLayer {
        &self.lora_q
    }
    pub fn lora_v(&self) -> &LoraLayer {
        &self.lora_v
    }
    pub fn w_k(&self) -> &Array2<f64> {
        &self.w_k
    }
    pub fn w_o(&self) -> &Array2<f64> {
        &self.w_o
    }

    /// Per-head softmax attention, heads concatenated (before `W_O`).
    /// Also returns Q, K, V and the per-head attention weights.
    fn attend(&self, x: ArrayView2<f64>, use_lora: bool) -> (Array2<f64>, [Array2<f64>; 3], Vec<Array2<f64>>) {
        let q = self.lora_q.forward(x, use_lora);
        let k = x.dot(&self.w_k.t());
        let v = self.lora_v.forward(x, use_lora);
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut heads = Array2::zeros((x.nrows(), self.d_model()));
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let cols = s![.., h * self.d_k..(h + 1) * self.d_k];
            let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut p);
            heads.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        (heads, [q, k, v], probs)
    }

    /// Concatenated head outputs before the output projection.
    pub fn head_outputs(&self, tokens: ArrayView2<f64>, use_lora: bool) -> Array2<f64> {
        self.attend(tokens, use_lora).0
    }

    /// Attention weights of every head (n×n, rows sum to 1).
    pub fn attention_weights(&self, tokens: ArrayView2<f64>, use_lora: bool) -> Vec<Array2<f64>> {
        self.attend(tokens, use_lora).2
    }

    /// `LN(X + concat(heads)·W_Oᵀ)`.
    pub fn forward(&self, tokens: ArrayView2<f64>, use_lora: bool) -> Result<Array2<f64>, AdapterError> {
        if tokens.ncols() != self.d_model() {
            return Err(dim_err(self.d_model(), tokens.ncols()));
        }
        Ok(self.forward_cached(tokens, use_lora).0)
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>, use_lora: bool) -> (Array2<f64>, AttentionCache) {
        let (heads, [q, k, v], probs) = self.attend(x, use_lora);
        let z = &x + &heads.dot(&self.w_o.t());
        let (y, inv_std) = layer_norm(z.view());
        let cache = AttentionCache { x: x.to_owned(), q, k, v, probs, y: y.clone(), inv_std };
        (y, cache)
    }

    pub(crate) fn backward(&self, cache: &AttentionCache, dy: &Array2<f64>) -> (Array2<f64>, AttentionGrads) {
        let dz = layer_norm_backward(&cache.y, &cache.inv_std, dy);
        let d_heads = dz.dot(&self.w_o);
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.dim());
        let mut dk = Array2::zeros(cache.k.dim());
        let mut dv = Array2::zeros(cache.v.dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * self.d_k..(h + 1) * self.d_k];
            let d_out = d_heads.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&d_out));
            let dp = d_out.dot(&cache.v.slice(cols).t());
            // Softmax Jacobian row by row: dS = P ⊙ (dP - rowsum(dP ⊙ P)).
            let row_dot = (&dp * p).sum_axis(Axis(1));
            let mut ds = dp;
            for (mut row, (p_row, c)) in ds.rows_mut().into_iter().zip(p.rows().into_iter().zip(row_dot.iter())) {
                for (g, pv) in row.iter_mut().zip(p_row.iter()) {
                    *g = pv * (*g - c) * scale;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let x = cache.x.view();
        let (dx_q, gq) = self.lora_q.backward(x, dq.view());
        let (dx_v, gv) = self.lora_v.backward(x, dv.view());
        let dx = dz + dx_q + dx_v + dk.dot(&self.w_k);
        (dx, AttentionGrads { q: gq, v: gv })
    }

    pub(crate) fn loras(&self) -> [&LoraLayer; 2] {
        [&self.lora_q, &self.lora_v]
    }

    pub(crate) fn loras_mut(&mut self) -> [&mut LoraLayer; 2] {
        [&mut self.lora_q, &mut self.lora_v]
    }

    pub(crate) fn push_frozen(&self, out: &mut Vec<f64>) {
        out.extend(self.lora_q.w().iter());
        out.extend(self.w_k.iter());
        out.extend(self.lora_v.w().iter());
        out.extend(self.w_o.iter());
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

/// Frozen position-wise feed-forward sublayer `LN(X + W₂·gelu(W₁·X + b₁) + b₂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

pub(crate) struct FeedForwardCache {
    pre: Array2<f64>,
    y: Array2<f64>,
    inv_std: Array1<f64>,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(d_model: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            w1: glorot(rng, d_ff, d_model),
            b1: Array1::zeros(d_ff),
            w2: glorot(rng, d_model, d_ff),
            b2: Array1::zeros(d_model),
        }
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, FeedForwardCache) {
        let pre = x.dot(&self.w1.t()) + &self.b1;
        let hidden = pre.mapv(gelu);
        let z = &x + &(hidden.dot(&self.w2.t()) + &self.b2);
        let (y, inv_std) = layer_norm(z.view());
        (y.clone(), FeedForwardCache { pre, y, inv_std })
    }

    pub(crate) fn backward(&self, cache: &FeedForwardCache, dy: &Array2<f64>) -> Array2<f64> {
        let dz = layer_norm_backward(&cache.y, &cache.inv_std, dy);
        let d_hidden = dz.dot(&self.w2);
        let d_pre = d_hidden * cache.pre.mapv(gelu_grad);
        dz + d_pre.dot(&self.w1)
    }

    pub(crate) fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub(crate) fn push_frozen(&self, out: &mut Vec<f64>) {
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
    }
}
