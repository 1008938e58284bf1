//! Structured N:M magnitude pruning.
//!
//! In every block of `M` consecutive elements the `N` entries of largest
//! magnitude survive unchanged and the rest are zeroed. Equal magnitudes are
//! resolved toward the lower index so that every block keeps exactly `N`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::tensor::{BlockAxis, BlockCursor, Mask, Matrix, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparsityError {
    #[error("invalid N:M pattern {n}:{m} (need 1 <= N < M)")]
    Pattern { n: usize, m: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SparsitySpec {
    n: usize,
    m: usize,
    axis: BlockAxis,
    padding: bool,
}

impl SparsitySpec {
    pub fn new(n: usize, m: usize) -> Result<Self, SparsityError> {
        if n == 0 || n >= m {
            return Err(SparsityError::Pattern { n, m });
        }
        Ok(Self {
            n,
            m,
            axis: BlockAxis::InputDim,
            padding: false,
        })
    }

    pub fn two_four() -> Self {
        Self::new(2, 4).unwrap()
    }

    pub fn two_eight() -> Self {
        Self::new(2, 8).unwrap()
    }

    pub fn two_sixteen() -> Self {
        Self::new(2, 16).unwrap()
    }

    pub fn presets() -> [Self; 3] {
        [Self::two_four(), Self::two_eight(), Self::two_sixteen()]
    }

    pub fn with_axis(mut self, axis: BlockAxis) -> Self {
        self.axis = axis;
        self
    }

    /// Zero-pad indivisible axes instead of failing.
    pub fn with_padding(mut self, padding: bool) -> Self {
        self.padding = padding;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn axis(&self) -> BlockAxis {
        self.axis
    }

    pub fn padding(&self) -> bool {
        self.padding
    }

    pub fn cursor(&self, rows: usize, cols: usize) -> Result<BlockCursor, TensorError> {
        BlockCursor::new(rows, cols, self.axis, self.m, self.padding)
    }
}

impl fmt::Display for SparsitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n, self.m)
    }
}

impl FromStr for SparsitySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (n, m) = s.split_once(':').ok_or_else(|| format!("expected N:M, got `{s}`"))?;
        let n = n.trim().parse().map_err(|_| format!("bad N in `{s}`"))?;
        let m = m.trim().parse().map_err(|_| format!("bad M in `{s}`"))?;
        SparsitySpec::new(n, m).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseResult {
    pub values: Matrix,
    pub mask: Mask,
    /// Per-block ξ: the N-th largest magnitude in the block.
    pub thresholds: Vec<f64>,
}

/// Positions (ascending) of the `n` largest magnitudes in `block`; ties go to
/// the lower index.
pub fn select_block(block: &[f64], n: usize, keep: &mut Vec<usize>) {
    keep.clear();
    for _ in 0..n.min(block.len()) {
        let mut best: Option<usize> = None;
        for (i, v) in block.iter().enumerate() {
            if keep.contains(&i) {
                continue;
            }
            // Strict `>` keeps the earliest index among equal magnitudes.
            if best.is_none_or(|b| v.abs() > block[b].abs()) {
                best = Some(i);
            }
        }
        keep.push(best.expect("n <= block length"));
    }
    keep.sort_unstable();
}

/// Blocks handled per parallel task.
pub const SPARSIFY_CHUNK: usize = 512;

pub fn sparsify(w: &Matrix, spec: &SparsitySpec) -> Result<SparseResult, SparsityError> {
    sparsify_with(w, spec, Execution::best())
}

pub fn sparsify_with(w: &Matrix, spec: &SparsitySpec, exec: Execution) -> Result<SparseResult, SparsityError> {
    let cursor = spec.cursor(w.rows(), w.cols())?;
    let data = w.data();
    let (n, m) = (spec.n, spec.m);
    let blocks: Vec<usize> = (0..cursor.num_blocks()).collect();
    // Each chunk yields its kept flat indices and per-block thresholds.
    let per_chunk = exec.map_chunks(&blocks, SPARSIFY_CHUNK, |_, ids| {
        let mut buf = vec![0.0; m];
        let mut keep = Vec::with_capacity(n);
        let mut kept = Vec::with_capacity(ids.len() * n);
        let mut xis = Vec::with_capacity(ids.len());
        for &b in ids {
            cursor.read(data, b, &mut buf);
            select_block(&buf, n, &mut keep);
            let mut xi = f64::INFINITY;
            for &k in &keep {
                xi = xi.min(buf[k].abs());
                if let Some(i) = cursor.slot(b, k) {
                    kept.push(i);
                }
            }
            xis.push(xi);
        }
        (kept, xis)
    });

    let mut mask = vec![false; w.len()];
    let mut thresholds = Vec::with_capacity(blocks.len());
    for (kept, xis) in per_chunk {
        for i in kept {
            mask[i] = true;
        }
        thresholds.extend(xis);
    }
    let values = data
        .iter()
        .zip(&mask)
        .map(|(&v, &keep)| if keep { v } else { 0.0 })
        .collect();
    Ok(SparseResult {
        values: Matrix::from_vec_unchecked(w.rows(), w.cols(), values),
        mask: Mask::new(w.rows(), w.cols(), mask)?,
        thresholds,
    })
}

/// Exhaustive reference: scans all `C(M, N)` keep-sets in lexicographic order
/// and returns the first one with maximal kept energy.
pub fn sparsify_oracle(block: &[f64], n: usize) -> Vec<bool> {
    let m = block.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut combo: Vec<usize> = (0..n).collect();
    loop {
        let energy: f64 = combo.iter().map(|&i| block[i] * block[i]).sum();
        if best.as_ref().is_none_or(|(e, _)| energy > *e) {
            best = Some((energy, combo.clone()));
        }
        // Advance to the next combination in lexicographic order.
        let Some(pos) = (0..n).rev().find(|&i| combo[i] < m - n + i) else {
            break;
        };
        combo[pos] += 1;
        for j in pos + 1..n {
            combo[j] = combo[j - 1] + 1;
        }
    }
    let mut mask = vec![false; m];
    for i in best.map(|(_, c)| c).unwrap_or_default() {
        mask[i] = true;
    }
    mask
}

pub fn mask_apply(w: &Matrix, mask: &Mask) -> Result<Matrix, TensorError> {
    if w.shape() != mask.shape() {
        return Err(TensorError::Dimension(format!(
            "mask {:?} vs matrix {:?}",
            mask.shape(),
            w.shape()
        )));
    }
    Ok(Matrix::from_vec_unchecked(
        w.rows(),
        w.cols(),
        w.data()
            .iter()
            .zip(mask.bits())
            .map(|(&v, &k)| if k { v } else { 0.0 })
            .collect(),
    ))
}
