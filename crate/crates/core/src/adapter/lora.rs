use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{dim_err, AdapterError};

/// Frozen linear map `W` (d×k) with a trainable low-rank update `B·A`.
///
/// `A` is r×k, `B` is d×r. The update is applied as two rank-r products and
/// `B·A` is never formed.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    w: Array2<f64>,
    a: Array2<f64>,
    b: Array2<f64>,
}

/// Gradients of one layer's trainable factors.
#[derive(Debug, Clone)]
pub struct LoraGrads {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraLayer {
    /// Attaches a fresh adapter: `A ~ N(0, 1/r)`, `B = 0`.
    pub fn new<R: Rng + ?Sized>(w: Array2<f64>, rank: usize, rng: &mut R) -> Result<Self, AdapterError> {
        let (d, k) = w.dim();
        if rank == 0 || rank > d.min(k) {
            return Err(AdapterError::Config(format!("rank {rank} must be in 1..={}", d.min(k))));
        }
        let normal = Normal::new(0.0, (1.0 / rank as f64).sqrt()).expect("positive std");
        let a = Array2::from_shape_fn((rank, k), |_| normal.sample(rng));
        let b = Array2::zeros((d, rank));
        Ok(Self { w, a, b })
    }

    pub fn from_parts(w: Array2<f64>, a: Array2<f64>, b: Array2<f64>) -> Result<Self, AdapterError> {
        let (d, k) = w.dim();
        let r = a.nrows();
        if a.ncols() != k {
            return Err(dim_err(format!("A with {k} columns"), format!("{} columns", a.ncols())));
        }
        if b.dim() != (d, r) {
            return Err(dim_err(format!("B of shape {d}x{r}"), format!("{:?}", b.dim())));
        }
        Ok(Self { w, a, b })
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }
    pub fn a(&self) -> &Array2<f64> {
        &self.a
    }
    pub fn b(&self) -> &Array2<f64> {
        &self.b
    }
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }
    pub fn d_out(&self) -> usize {
        self.w.nrows()
    }
    pub fn d_in(&self) -> usize {
        self.w.ncols()
    }

    /// `W·x + B·(A·x)` for a single input vector.
    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>, AdapterError> {
        if x.len() != self.d_in() {
            return Err(dim_err(self.d_in(), x.len()));
        }
        let x = Array1::from(x.to_vec());
        let h = self.a.dot(&x);
        let y = self.w.dot(&x) + self.b.dot(&h);
        Ok(y.to_vec())
    }

    /// Row-wise forward on an n×k input. With `use_lora = false` only the
    /// frozen map is applied.
    pub fn forward(&self, x: ArrayView2<f64>, use_lora: bool) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        if use_lora {
            let h = x.dot(&self.a.t());
            y += &h.dot(&self.b.t());
        }
        y
    }

    /// Returns `dL/dx` and the factor gradients for upstream `dy` (n×d).
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> (Array2<f64>, LoraGrads) {
        let h = x.dot(&self.a.t());
        let dh = dy.dot(&self.b);
        let dx = dy.dot(&self.w) + dh.dot(&self.a);
        let grads = LoraGrads { a: dh.t().dot(&x), b: dy.t().dot(&h) };
        (dx, grads)
    }

    pub fn n_trainable(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn n_frozen(&self) -> usize {
        self.w.len()
    }

    pub(crate) fn push_trainable(&self, out: &mut Vec<f64>) {
        out.extend(self.a.iter());
        out.extend(self.b.iter());
    }

    /// Reads `A` then `B` (row-major) from `params`, returning the rest.
    pub(crate) fn take_trainable<'p>(&mut self, params: &'p [f64]) -> &'p [f64] {
        let (na, nb) = (self.a.len(), self.b.len());
        for (dst, src) in self.a.iter_mut().zip(&params[..na]) {
            *dst = *src;
        }
        for (dst, src) in self.b.iter_mut().zip(&params[na..na + nb]) {
            *dst = *src;
        }
        &params[na + nb..]
    }
}

impl LoraGrads {
    pub(crate) fn push(&self, out: &mut Vec<f64>) {
        out.extend(self.a.iter());
        out.extend(self.b.iter());
    }
}
