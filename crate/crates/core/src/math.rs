//! Flat parameter vectors, dense row-major matrices, keyed RNG streams and the
//! central-difference gradient checker.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A flat real-valued parameter or gradient vector.
///
/// Every model's weights, every client update and every gradient travels as
/// a `ParamVector`; aggregation rules never look at layer structure.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn check_dim(&self, other: &ParamVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        Ok(())
    }

    /// `self += a * x`
    pub fn add_scaled(&mut self, a: f64, x: &ParamVector) -> Result<()> {
        self.check_dim(x)?;
        for (s, xv) in self.0.iter_mut().zip(&x.0) {
            *s += a * xv;
        }
        Ok(())
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        axpby(1.0, self, -1.0, other)
    }

    pub fn scale(&self, a: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| a * v).collect())
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn dist_sq(&self, other: &ParamVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// Little-endian: `u64` length prefix followed by `dim` binary64 values.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(&(self.dim() as u64).to_le_bytes())?;
        for v in &self.0 {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 8 * self.dim());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads one vector in the format produced by [`ParamVector::write_to`].
    /// A short read surfaces as `UnexpectedEof`.
    pub fn read_from<R: Read>(mut input: R) -> std::io::Result<ParamVector> {
        let mut word = [0u8; 8];
        input.read_exact(&mut word)?;
        let dim = u64::from_le_bytes(word) as usize;
        let mut values = Vec::with_capacity(dim.min(1 << 24));
        for _ in 0..dim {
            input.read_exact(&mut word)?;
            values.push(f64::from_le_bytes(word));
        }
        Ok(ParamVector(values))
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `a·x + b·y`, elementwise.
pub fn axpby(a: f64, x: &ParamVector, b: f64, y: &ParamVector) -> Result<ParamVector> {
    x.check_dim(y)?;
    Ok(ParamVector(
        x.0.iter().zip(&y.0).map(|(xv, yv)| a * xv + b * yv).collect(),
    ))
}

/// `Σ_k (w_k / Σw) · v_k`.
///
/// Coefficients are normalised first and the sum runs in list order, so the
/// result depends only on the weights' ratios and on the input order.
pub fn weighted_mean(vectors: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if vectors.is_empty() {
        return Err(Error::Empty("weighted_mean needs at least one vector"));
    }
    if vectors.len() != weights.len() {
        return Err(Error::InvalidWeights(format!(
            "{} vectors but {} weights",
            vectors.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidWeights(format!(
            "weights must be finite and nonnegative, got {w}"
        )));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidWeights("all weights are zero".into()));
    }
    let dim = vectors[0].dim();
    let mut out = vec![0.0; dim];
    for (v, w) in vectors.iter().zip(weights) {
        if v.dim() != dim {
            return Err(Error::DimensionMismatch {
                left: dim,
                right: v.dim(),
            });
        }
        let c = w / total;
        for (o, x) in out.iter_mut().zip(&v.0) {
            *o += c * x;
        }
    }
    Ok(ParamVector(out))
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                left: rows * cols,
                right: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    left: cols,
                    right: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::DimensionMismatch {
                    left: cols,
                    right: m.cols,
                });
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Matrix { rows, cols, data })
    }
}

/// 64-bit FNV-1a, used to turn purpose tags into key material.
fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// A reproducible random stream keyed by `(seed, purpose, client, round)`.
///
/// The key is expanded directly into a ChaCha8 key, so distinct keys give
/// independent streams and no stream depends on the order in which others
/// were consumed.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub purpose: String,
    pub client: u64,
    pub round: u64,
}

impl RngStream {
    pub fn new(seed: u64, purpose: &str, client: u64, round: u64) -> Self {
        RngStream {
            seed,
            purpose: purpose.to_string(),
            client,
            round,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&fnv1a(&self.purpose).to_le_bytes());
        key[16..24].copy_from_slice(&self.client.to_le_bytes());
        key[24..32].copy_from_slice(&self.round.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }
}

/// A scalar objective over a flat parameter vector with an analytic gradient.
pub trait Differentiable {
    fn dim(&self) -> usize;
    fn value(&self, w: &ParamVector) -> Result<f64>;
    fn value_and_grad(&self, w: &ParamVector) -> Result<(f64, ParamVector)>;
}

/// Largest relative error between the analytic gradient and the central
/// difference `(L(w+h·e_i) − L(w−h·e_i)) / 2h`, over all coordinates.
///
/// Relative error is `|a − f| / max(1, |a|, |f|)`.
pub fn fd_gradient_check<D: Differentiable + ?Sized>(obj: &D, w: &ParamVector, h: f64) -> Result<f64> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::invalid(format!("step h must be positive, got {h}")));
    }
    let (_, grad) = obj.value_and_grad(w)?;
    if grad.dim() != w.dim() {
        return Err(Error::DimensionMismatch {
            left: w.dim(),
            right: grad.dim(),
        });
    }
    let mut probe = w.clone();
    let mut worst = 0.0f64;
    for i in 0..w.dim() {
        let orig = probe.0[i];
        probe.0[i] = orig + h;
        let up = obj.value(&probe)?;
        probe.0[i] = orig - h;
        let down = obj.value(&probe)?;
        probe.0[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        let fd = (up - down) / (2.0 * h);
        let an = grad.0[i];
        let rel = (an - fd).abs() / 1f64.max(an.abs()).max(fd.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}
