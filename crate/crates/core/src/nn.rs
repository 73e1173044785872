//! Small `f64` building blocks with hand-written backward passes.
//!
//! Every layer here is frozen: backward passes propagate gradients to the
//! layer input only and never compute weight gradients.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::fnv1a64;

pub type Mat = Array2<f64>;

/// Deterministic parameter initializer. Every tensor draws from its own
/// stream keyed by `(seed, tag)`, so adding a tensor never shifts the
/// values of another.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    fn rng(&self, tag: &str) -> ChaCha8Rng {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(tag.as_bytes());
        ChaCha8Rng::seed_from_u64(fnv1a64(&bytes))
    }

    pub fn normal(&self, tag: &str, rows: usize, cols: usize, std: f64) -> Mat {
        let mut rng = self.rng(tag);
        let dist = Normal::new(0.0, std).expect("finite std");
        Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
    }

    pub fn normal_vec(&self, tag: &str, n: usize, std: f64) -> Array1<f64> {
        self.normal(tag, 1, n, std).into_shape_with_order(n).unwrap()
    }
}

/// Fold of parameter bit patterns, used to prove frozen tensors never move.
#[derive(Debug, Default)]
pub struct Checksum(Vec<u8>);

impl Checksum {
    pub fn add(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.0.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }

    pub fn finish(&self) -> u64 {
        fnv1a64(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn init(init: &Init, tag: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: init.normal(&format!("{tag}.w"), d_in, d_out, (1.0 / d_in as f64).sqrt()),
            bias: init.normal_vec(&format!("{tag}.b"), d_out, 0.02),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Mat {
        x.dot(&self.weight) + &self.bias
    }

    pub fn backward(&self, dy: &Mat) -> Mat {
        dy.dot(&self.weight.t())
    }

    pub fn checksum(&self, ck: &mut Checksum) {
        ck.add(self.weight.iter().copied());
        ck.add(self.bias.iter().copied());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Array1<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn init(init: &Init, tag: &str, d: usize) -> Self {
        Self {
            gamma: init.normal_vec(&format!("{tag}.g"), d, 0.05) + 1.0,
            beta: init.normal_vec(&format!("{tag}.b"), d, 0.02),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).unwrap();
        let centered = x - &mean.insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, dy: &Mat, cache: &LayerNormCache) -> Mat {
        let d = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let sum = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
        let sum_x = (&dxhat * &cache.xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
        let inner = dxhat * d - sum - &cache.xhat * &sum_x;
        inner * &(cache.inv_std.view().insert_axis(Axis(1)).mapv(|s| s / d))
    }

    pub fn checksum(&self, ck: &mut Checksum) {
        ck.add(self.gamma.iter().copied());
        ck.add(self.beta.iter().copied());
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax; entries equal to `-inf` get probability zero.
pub fn softmax_rows(scores: &mut Mat) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Fixed sinusoidal position code for position `pos` in width `d`.
pub fn sinusoid(pos: usize, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |i| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = pos as f64 * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub n_heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

pub struct AttentionCache {
    q: Mat,
    k: Mat,
    v: Mat,
    /// Per-head attention distributions, `tq x tk`.
    pub probs: Vec<Mat>,
}

impl MultiHeadAttention {
    pub fn init(init: &Init, tag: &str, d: usize, n_heads: usize) -> Self {
        assert!(
            n_heads > 0 && d.is_multiple_of(n_heads),
            "d_model must divide into heads"
        );
        Self {
            n_heads,
            q: Linear::init(init, &format!("{tag}.q"), d, d),
            k: Linear::init(init, &format!("{tag}.k"), d, d),
            v: Linear::init(init, &format!("{tag}.v"), d, d),
            o: Linear::init(init, &format!("{tag}.o"), d, d),
        }
    }

    fn head_dim(&self) -> usize {
        self.q.weight.ncols() / self.n_heads
    }

    /// Attention of `x_q` over `x_kv`. With `causal`, query `i` sees keys
    /// `0..=i`.
    pub fn forward(&self, x_q: &Mat, x_kv: &Mat, causal: bool) -> (Mat, AttentionCache) {
        let q = self.q.forward(&x_q.view());
        let k = self.k.forward(&x_kv.view());
        let v = self.v.forward(&x_kv.view());
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = Vec::with_capacity(self.n_heads);
        let mut concat = Mat::zeros((q.nrows(), q.ncols()));
        for h in 0..self.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            if causal {
                for ((i, j), s) in scores.indexed_iter_mut() {
                    if j > i {
                        *s = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_rows(&mut scores);
            concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let out = self.o.forward(&concat.view());
        (out, AttentionCache { q, k, v, probs })
    }

    /// Gradients with respect to the query-side and key/value-side inputs.
    pub fn backward(&self, dout: &Mat, cache: &AttentionCache) -> (Mat, Mat) {
        let dconcat = self.o.backward(dout);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Mat::zeros(cache.q.raw_dim());
        let mut dk = Mat::zeros(cache.k.raw_dim());
        let mut dv = Mat::zeros(cache.v.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_o = dconcat.slice(cols);
            let dp = d_o.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_o));
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (dp - row_dot) * p * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let dx_q = self.q.backward(&dq);
        let dx_kv = self.k.backward(&dk) + self.v.backward(&dv);
        (dx_q, dx_kv)
    }

    pub fn checksum(&self, ck: &mut Checksum) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.checksum(ck);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub struct FeedForwardCache {
    pre: Mat,
}

impl FeedForward {
    pub fn init(init: &Init, tag: &str, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::init(init, &format!("{tag}.up"), d, hidden),
            down: Linear::init(init, &format!("{tag}.down"), hidden, d),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, FeedForwardCache) {
        let pre = self.up.forward(&x.view());
        let out = self.down.forward(&pre.mapv(gelu).view());
        (out, FeedForwardCache { pre })
    }

    pub fn backward(&self, dout: &Mat, cache: &FeedForwardCache) -> Mat {
        let dact = self.down.backward(dout);
        let dpre = dact * cache.pre.mapv(gelu_grad);
        self.up.backward(&dpre)
    }

    pub fn checksum(&self, ck: &mut Checksum) {
        self.up.checksum(ck);
        self.down.checksum(ck);
    }
}

pub fn vstack(a: &Mat, b: &Mat) -> Mat {
    concatenate(Axis(0), &[a.view(), b.view()]).expect("matching widths")
}
