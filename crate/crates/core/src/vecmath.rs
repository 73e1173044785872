//! Dense-vector primitives over `f32` storage with `f64` accumulation.

use crate::error::{Error, Result};

/// A single finite embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl AsRef<[f32]> for Embedding {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// An `R x D` block of finite feature rows, stored row-major. `R >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureBlock {
    pub fn new(rows: Vec<Vec<f32>>) -> Result<Self> {
        let dim = rows.first().ok_or(Error::EmptyBlock)?.len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend(row);
        }
        Self::from_flat(dim, data)
    }

    pub fn from_flat(dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.is_empty() || dim == 0 {
            return Err(Error::EmptyBlock);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not divide into rows of width {dim}",
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { dim, data })
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }
}

fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(Error::NonFinite(pos)),
        None => Ok(()),
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += f64::from(x[l]) * f64::from(y[l]);
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    acc.iter().sum::<f64>() + tail
}

pub fn l2_norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity `q.k / (|q||k|)`, clamped to `[-1, 1]`.
pub fn cosine_sim(q: &[f32], k: &[f32]) -> Result<f64> {
    if q.len() != k.len() {
        return Err(Error::DimensionMismatch {
            expected: q.len(),
            found: k.len(),
        });
    }
    let (qn, kn) = (l2_norm(q), l2_norm(k));
    if qn == 0.0 || kn == 0.0 {
        return Err(Error::ZeroVector { row: None });
    }
    Ok(cosine_with_norms(q, qn, k, kn))
}

/// Same arithmetic as [`cosine_sim`] with both norms precomputed and known
/// to be nonzero. Scans over a memory use this so that cached norms give
/// bit-identical scores to the checked path.
#[inline]
pub fn cosine_with_norms(q: &[f32], q_norm: f64, k: &[f32], k_norm: f64) -> f64 {
    (dot(q, k) / (q_norm * k_norm)).clamp(-1.0, 1.0)
}

/// Element-wise arithmetic mean over the rows of `block`.
pub fn mean_embed(block: &FeatureBlock) -> Embedding {
    let mut acc = vec![0f64; block.dim()];
    for row in block.rows() {
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += f64::from(x);
        }
    }
    let n = block.n_rows() as f64;
    Embedding(acc.into_iter().map(|a| (a / n) as f32).collect())
}
