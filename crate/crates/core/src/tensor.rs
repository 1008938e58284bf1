//! Dense row-major matrices, block traversal and a counter-based RNG.
//!
//! A `Matrix` with `rows = m` and `cols = n` stores a weight matrix whose
//! columns are the per-output weight vectors `w_i`. Layer outputs are
//! computed as `y = Wᵀ x`, so `x` has `m` rows.
//!
//! # Random streams
//!
//! [`Rng`] is SplitMix64 driven by an explicit counter: the `k`-th draw
//! (starting at `k = 1`) is `mix(seed + k * 0x9E3779B97F4A7C15)` with the
//! standard SplitMix64 finalizer. Uniform doubles take the top 53 bits.
//! Gaussian draws use the Box–Muller cosine branch and consume exactly two
//! uniform draws each: `u1 = 1 - U` (so `u1 ∈ (0, 1]`), `u2 = U`,
//! `z = sqrt(-2 ln u1) · cos(2π u2)`. Everything is integer arithmetic plus
//! IEEE `ln`/`cos`/`sqrt`, so streams match across platforms.

use std::fmt;
use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("block error: length {len} along {axis} is not divisible by block length {block_len}")]
    Block {
        len: usize,
        block_len: usize,
        axis: BlockAxis,
    },
    #[error("matrix parse error: {0}")]
    Parse(String),
}

/// Row-major 2-D array of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            write!(f, "\n  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Dimension(format!(
                "data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds from nested rows. Mostly convenient in tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::Dimension("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Column vector from a slice.
    pub fn column_vector(values: &[f64]) -> Result<Self, TensorError> {
        Self::new(values.len(), 1, values.to_vec())
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Copy-and-write: returns a new matrix with one entry replaced.
    pub fn with_entry(&self, r: usize, c: usize, value: f64) -> Result<Self, TensorError> {
        let mut data = self.data.clone();
        data[r * self.cols + c] = value;
        Self::new(self.rows, self.cols, data)
    }

    /// Elementwise map. The closure must keep values finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Self, TensorError> {
        self.ensure_same_shape(other)?;
        Ok(Self::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self::from_vec_unchecked(self.cols, self.rows, out)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn ensure_same_shape(&self, other: &Matrix) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::Dimension(format!(
                "shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// `Wᵀ x`: `W` is `m×n`, `x` is `m×k`, result is `n×k`.
///
/// Each output entry accumulates over the shared dimension in increasing
/// index order.
pub fn matmul(w: &Matrix, x: &Matrix) -> Result<Matrix, TensorError> {
    if w.rows != x.rows {
        return Err(TensorError::Dimension(format!(
            "matmul: W is {}x{}, x is {}x{}",
            w.rows, w.cols, x.rows, x.cols
        )));
    }
    let (m, n, k) = (w.rows, w.cols, x.cols);
    let mut out = vec![0.0; n * k];
    // out[i][j] = sum_r w[r][i] * x[r][j], r ascending.
    for r in 0..m {
        let wr = w.row(r);
        let xr = x.row(r);
        for (i, &wv) in wr.iter().enumerate() {
            let dst = &mut out[i * k..(i + 1) * k];
            for (d, &xv) in dst.iter_mut().zip(xr) {
                *d += wv * xv;
            }
        }
    }
    Ok(Matrix::from_vec_unchecked(n, k, out))
}

/// Plain `A · B` (`a` is `p×q`, `b` is `q×r`).
pub fn matmul_nn(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if a.cols != b.rows {
        return Err(TensorError::Dimension(format!(
            "matmul_nn: {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (p, q, r) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let dst = &mut out[i * r..(i + 1) * r];
        for t in 0..q {
            let av = a.data[i * q + t];
            for (d, &bv) in dst.iter_mut().zip(b.row(t)) {
                *d += av * bv;
            }
        }
    }
    Ok(Matrix::from_vec_unchecked(p, r, out))
}

/// Direction along which N:M blocks are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum BlockAxis {
    /// Consecutive elements of a column `w_i`, i.e. along the reduction
    /// dimension.
    #[default]
    InputDim,
    /// Consecutive elements of the flat row-major buffer.
    FlatRowMajor,
}

impl BlockAxis {
    pub fn code(self) -> u8 {
        match self {
            BlockAxis::InputDim => 0,
            BlockAxis::FlatRowMajor => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BlockAxis::InputDim),
            1 => Some(BlockAxis::FlatRowMajor),
            _ => None,
        }
    }
}

impl fmt::Display for BlockAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockAxis::InputDim => "input-dim",
            BlockAxis::FlatRowMajor => "flat-row-major",
        })
    }
}

impl std::str::FromStr for BlockAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "input-dim" | "input" => Ok(BlockAxis::InputDim),
            "flat-row-major" | "flat" => Ok(BlockAxis::FlatRowMajor),
            other => Err(format!("unknown block axis `{other}`")),
        }
    }
}

/// Index arithmetic for walking a `rows×cols` matrix in blocks of
/// `block_len` elements.
///
/// Slots past the end of an indivisible axis (only when padding is on)
/// resolve to `None`; they read as zero and are never written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockCursor {
    rows: usize,
    cols: usize,
    axis: BlockAxis,
    block_len: usize,
    blocks_per_line: usize,
    num_blocks: usize,
}

impl BlockCursor {
    pub fn new(
        rows: usize,
        cols: usize,
        axis: BlockAxis,
        block_len: usize,
        padding: bool,
    ) -> Result<Self, TensorError> {
        if block_len == 0 {
            return Err(TensorError::Dimension("block length must be positive".into()));
        }
        let line_len = match axis {
            BlockAxis::InputDim => rows,
            BlockAxis::FlatRowMajor => rows * cols,
        };
        if line_len % block_len != 0 && !padding {
            return Err(TensorError::Block {
                len: line_len,
                block_len,
                axis,
            });
        }
        let blocks_per_line = line_len.div_ceil(block_len);
        let num_blocks = match axis {
            BlockAxis::InputDim => blocks_per_line * cols,
            BlockAxis::FlatRowMajor => blocks_per_line,
        };
        Ok(Self {
            rows,
            cols,
            axis,
            block_len,
            blocks_per_line,
            num_blocks,
        })
    }

    pub fn for_matrix(w: &Matrix, axis: BlockAxis, block_len: usize, padding: bool) -> Result<Self, TensorError> {
        Self::new(w.rows, w.cols, axis, block_len, padding)
    }

    #[inline]
    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    #[inline]
    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn axis(&self) -> BlockAxis {
        self.axis
    }

    /// Flat index of slot `k` of block `b`, or `None` for a padding slot.
    #[inline]
    pub fn slot(&self, b: usize, k: usize) -> Option<usize> {
        debug_assert!(b < self.num_blocks && k < self.block_len);
        match self.axis {
            BlockAxis::InputDim => {
                let col = b / self.blocks_per_line;
                let row = (b % self.blocks_per_line) * self.block_len + k;
                (row < self.rows).then(|| row * self.cols + col)
            }
            BlockAxis::FlatRowMajor => {
                let i = b * self.block_len + k;
                (i < self.rows * self.cols).then_some(i)
            }
        }
    }

    /// Number of real (non-padding) slots in block `b`.
    pub fn real_slots(&self, b: usize) -> usize {
        (0..self.block_len).take_while(|&k| self.slot(b, k).is_some()).count()
    }

    /// Copies block `b` of `data` into `buf`, zero-filling padding.
    #[inline]
    pub fn read(&self, data: &[f64], b: usize, buf: &mut [f64]) {
        for (k, out) in buf.iter_mut().enumerate().take(self.block_len) {
            *out = self.slot(b, k).map_or(0.0, |i| data[i]);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> {
        0..self.num_blocks
    }
}

/// All blocks of `w` as owned value vectors (padding reads as 0).
pub fn blocks(w: &Matrix, axis: BlockAxis, block_len: usize, padding: bool) -> Result<Vec<Vec<f64>>, TensorError> {
    let cursor = BlockCursor::for_matrix(w, axis, block_len, padding)?;
    Ok(cursor
        .iter()
        .map(|b| {
            let mut buf = vec![0.0; block_len];
            cursor.read(w.data(), b, &mut buf);
            buf
        })
        .collect())
}

/// Boolean matrix with the same shape conventions as [`Matrix`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self, TensorError> {
        if bits.len() != rows * cols {
            return Err(TensorError::Dimension(format!(
                "mask length {} != {rows}x{cols}",
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            bits: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Row-major bitset, bit `i` stored at `byte[i / 8] >> (i % 8)`.
    pub fn to_bitset(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            out[i / 8] |= 1 << (i % 8);
        }
        out
    }

    pub fn from_bitset(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self, TensorError> {
        let n = rows * cols;
        if bytes.len() != n.div_ceil(8) {
            return Err(TensorError::Parse(format!(
                "bitset needs {} bytes for {n} bits, got {}",
                n.div_ceil(8),
                bytes.len()
            )));
        }
        let bits = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Self { rows, cols, bits })
    }
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based SplitMix64 stream. See the module docs for the exact
/// definition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `(seed, stream)`.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(splitmix_finalize(
            self.seed ^ splitmix_finalize(stream.wrapping_add(1).wrapping_mul(GOLDEN)),
        ))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        splitmix_finalize(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box–Muller (cosine branch, two draws).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)`, rejection-sampled so it is unbiased.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    /// Uniform on `[-1, 1)`.
    Uniform,
    /// Standard normal.
    Gaussian,
}

pub fn rand_matrix(rng: &mut Rng, rows: usize, cols: usize, dist: Distribution) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| match dist {
            Distribution::Uniform => rng.uniform_range(-1.0, 1.0),
            Distribution::Gaussian => rng.gaussian(),
        })
        .collect();
    Matrix::from_vec_unchecked(rows, cols, data)
}

pub const MATRIX_MAGIC: &[u8; 4] = b"MTRX";

impl Matrix {
    /// Headerless CSV, one row per line. Values use Rust's shortest
    /// round-trip formatting.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self, TensorError> {
        let mut rows = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| TensorError::Parse(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| TensorError::Parse(format!("line {}: `{}`: {e}", lineno + 1, f.trim())))
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    /// `MTRX` + u32 rows + u32 cols + u32 reserved (zero), then
    /// little-endian f64 data.
    pub fn write_binary<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(MATRIX_MAGIC)?;
        out.write_all(&(self.rows as u32).to_le_bytes())?;
        out.write_all(&(self.cols as u32).to_le_bytes())?;
        out.write_all(&0u32.to_le_bytes())?;
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self, TensorError> {
        let mut header = [0u8; 16];
        input
            .read_exact(&mut header)
            .map_err(|e| TensorError::Parse(format!("header: {e}")))?;
        if &header[0..4] != MATRIX_MAGIC {
            return Err(TensorError::Parse("bad magic".into()));
        }
        let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut raw = Vec::new();
        input
            .read_to_end(&mut raw)
            .map_err(|e| TensorError::Parse(e.to_string()))?;
        if raw.len() != rows * cols * 8 {
            return Err(TensorError::Parse(format!(
                "expected {} payload bytes, found {}",
                rows * cols * 8,
                raw.len()
            )));
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, cols, data)
    }
}
