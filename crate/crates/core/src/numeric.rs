//! Dense row-major matrices, a seedable PRNG with per-purpose streams, and
//! the small set of numeric primitives shared by every other module.
//!
//! Everything here is f64. Reductions run row-major, left-to-right, so the
//! same inputs always produce bit-identical outputs.

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MmlError, Result};

/// Dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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
            return Err(MmlError::DimensionMismatch(format!(
                "expected {} values for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(MmlError::InvalidArgument("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(MmlError::DimensionMismatch(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// self (n×k) · other (k×m) → n×m.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(MmlError::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for j in 0..other.cols {
                    out_row[j] += a * orow[j];
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// self += scale * other, entrywise.
    pub fn axpy(&mut self, scale: f64, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MmlError::DimensionMismatch(format!(
                "axpy shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Squared Euclidean distances between all row pairs of `a` (n×d) and `b` (m×d).
pub fn pairwise_sq_dist(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(MmlError::DimensionMismatch(format!(
            "pairwise_sq_dist: {} vs {} columns",
            a.cols(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.set(i, j, sq_dist(a.row(i), b.row(j)));
        }
    }
    Ok(out)
}

/// Softmax with max-subtraction. Input must be finite.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(MmlError::InvalidArgument("softmax over empty input".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(MmlError::NonFinite("softmax input".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Rescale every row to unit Euclidean norm. Rejects zero-norm rows.
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(MmlError::ZeroNormRow { row: i });
        }
        for v in out.row_mut(i) {
            *v /= norm;
        }
    }
    Ok(out)
}

/// Purpose tags for independent PRNG streams derived from one root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamId {
    Data = 0,
    Init = 1,
    Sampling = 2,
    Eval = 3,
    GradCheck = 4,
}

/// Deterministic PRNG: ChaCha12 keyed by a 64-bit seed, one ChaCha stream
/// per purpose. Identical seed + stream produce the identical value
/// sequence on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha12Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64, stream: StreamId) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(stream as u64);
        Rng {
            inner,
            spare_normal: None,
        }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn gen_range(&mut self, bound: usize) -> usize {
        self.inner.gen_range(0..bound)
    }

    /// Standard normal via Box–Muller; scaled by `sigma`.
    pub fn normal(&mut self, sigma: f64) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return sigma * z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        sigma * r * theta.cos()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// Snapshot of the generator state for checkpointing.
    pub fn state(&self) -> RngState {
        RngState {
            seed: hex_encode(&self.inner.get_seed()),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos().to_string(),
            spare_normal: self.spare_normal.map(|v| format!("{v:?}")),
        }
    }

    pub fn from_state(state: &RngState) -> Result<Self> {
        let seed_bytes = hex_decode(&state.seed)
            .ok_or_else(|| MmlError::Config("bad rng seed hex".into()))?;
        let mut inner = ChaCha12Rng::from_seed(seed_bytes);
        inner.set_stream(state.stream);
        let word_pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| MmlError::Config("bad rng word position".into()))?;
        inner.set_word_pos(word_pos);
        let spare_normal = match &state.spare_normal {
            Some(s) => Some(
                s.parse::<f64>()
                    .map_err(|_| MmlError::Config("bad rng spare value".into()))?,
            ),
            None => None,
        };
        Ok(Rng {
            inner,
            spare_normal,
        })
    }
}

/// Serializable PRNG state. f64 spare is kept as a decimal string so the
/// round trip is bit-exact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
    pub spare_normal: Option<String>,
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for i in 0..32 {
        out[i] = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}
