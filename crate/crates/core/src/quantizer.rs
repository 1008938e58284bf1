//! LSQ-style fake quantization: `ŵ = s · clamp(round(w / s), Q_N, Q_P)`.
//!
//! Rounding is round-half-to-even. An entry counts as clamped when its
//! scaled value `v = w / s` lies strictly outside `[Q_N, Q_P]`; clamped
//! entries get zero weight gradient and contribute `Q_N`/`Q_P` to the scale
//! gradient, as in LSQ.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Mask, Matrix, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("unsupported bit-width {0} (expected one of 2, 3, 4, 8, 16)")]
    Bits(u8),
    #[error("scale must be finite and > 0, got {0}")]
    Scale(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub const SUPPORTED_BITS: [u8; 5] = [2, 3, 4, 8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantMode {
    /// Signed two's-complement grid `[-2^(b-1), 2^(b-1) - 1]`.
    WeightSymmetric,
    /// Unsigned grid starting at 0.
    ActivationUnsigned,
}

/// Upper code for [`QuantMode::ActivationUnsigned`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum UnsignedRange {
    /// `Q_P = 2^b - 1`.
    #[default]
    Full,
    /// `Q_P = 2^(b-1)`.
    Half,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    bits: u8,
    mode: QuantMode,
    scale: f64,
    unsigned_range: UnsignedRange,
}

impl QuantSpec {
    pub fn new(bits: u8, mode: QuantMode, scale: f64) -> Result<Self, QuantError> {
        if !SUPPORTED_BITS.contains(&bits) {
            return Err(QuantError::Bits(bits));
        }
        check_scale(scale)?;
        Ok(Self {
            bits,
            mode,
            scale,
            unsigned_range: UnsignedRange::Full,
        })
    }

    pub fn weight(bits: u8, scale: f64) -> Result<Self, QuantError> {
        Self::new(bits, QuantMode::WeightSymmetric, scale)
    }

    pub fn activation(bits: u8, scale: f64) -> Result<Self, QuantError> {
        Self::new(bits, QuantMode::ActivationUnsigned, scale)
    }

    pub fn with_unsigned_range(mut self, range: UnsignedRange) -> Self {
        self.unsigned_range = range;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self, QuantError> {
        check_scale(scale)?;
        self.scale = scale;
        Ok(self)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn unsigned_range(&self) -> UnsignedRange {
        self.unsigned_range
    }

    pub fn q_n(&self) -> i64 {
        match self.mode {
            QuantMode::WeightSymmetric => -(1i64 << (self.bits - 1)),
            QuantMode::ActivationUnsigned => 0,
        }
    }

    pub fn q_p(&self) -> i64 {
        match (self.mode, self.unsigned_range) {
            (QuantMode::WeightSymmetric, _) => (1i64 << (self.bits - 1)) - 1,
            (QuantMode::ActivationUnsigned, UnsignedRange::Full) => (1i64 << self.bits) - 1,
            (QuantMode::ActivationUnsigned, UnsignedRange::Half) => 1i64 << (self.bits - 1),
        }
    }

    /// Code and clamp flag for a single value.
    #[inline]
    pub fn quantize_scalar(&self, w: f64) -> (i32, bool) {
        let v = w / self.scale;
        let (qn, qp) = (self.q_n() as f64, self.q_p() as f64);
        let code = round_half_even(v).clamp(qn, qp);
        (code as i32, v < qn || v > qp)
    }

    #[inline]
    pub fn fake_quantize_scalar(&self, w: f64) -> f64 {
        self.scale * self.quantize_scalar(w).0 as f64
    }
}

/// Same result as [`f64::round_ties_even`], without the libm call that
/// baseline x86-64 needs for it.
#[inline]
pub fn round_half_even(v: f64) -> f64 {
    const TWO_52: f64 = 4_503_599_627_370_496.0;
    let a = v.abs();
    if a < TWO_52 {
        ((a + TWO_52) - TWO_52).copysign(v)
    } else {
        v
    }
}

impl fmt::Display for QuantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-bit {:?} s={} [{}, {}]",
            self.bits,
            self.mode,
            self.scale,
            self.q_n(),
            self.q_p()
        )
    }
}

fn check_scale(scale: f64) -> Result<(), QuantError> {
    if scale.is_finite() && scale > 0.0 {
        Ok(())
    } else {
        Err(QuantError::Scale(scale))
    }
}

/// Integer codes in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodeMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i32>,
}

impl CodeMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<i32>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Dimension(format!(
                "code length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
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

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn dequantize(&self, scale: f64) -> Matrix {
        Matrix::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().map(|&c| scale * c as f64).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantResult {
    /// Dequantized values `s · q`.
    pub values: Matrix,
    pub codes: CodeMatrix,
    pub clamp_mask: Mask,
}

pub fn quantize(w: &Matrix, spec: &QuantSpec) -> QuantResult {
    let n = w.len();
    let mut values = Vec::with_capacity(n);
    let mut codes = Vec::with_capacity(n);
    let mut clamped = Vec::with_capacity(n);
    for &x in w.data() {
        let (code, c) = spec.quantize_scalar(x);
        values.push(spec.scale * code as f64);
        codes.push(code);
        clamped.push(c);
    }
    let (rows, cols) = w.shape();
    QuantResult {
        values: Matrix::from_vec_unchecked(rows, cols, values),
        codes: CodeMatrix {
            rows,
            cols,
            data: codes,
        },
        clamp_mask: Mask::new(rows, cols, clamped).expect("shape"),
    }
}

/// Outcome of [`init_scale`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleInit {
    pub scale: f64,
    /// Set when the input was all zeros and the scale fell back to the floor.
    pub degenerate: bool,
}

pub const SCALE_FLOOR: f64 = f64::EPSILON;

/// LSQ initialization `s = 2·mean(|W|) / √Q_P`.
pub fn init_scale(w: &Matrix, spec: &QuantSpec) -> Result<ScaleInit, QuantError> {
    if w.is_empty() {
        return Err(TensorError::Dimension("init_scale on empty matrix".into()).into());
    }
    let mean_abs = w.data().iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
    let s = 2.0 * mean_abs / (spec.q_p() as f64).sqrt();
    if s > SCALE_FLOOR {
        Ok(ScaleInit {
            scale: s,
            degenerate: false,
        })
    } else {
        Ok(ScaleInit {
            scale: SCALE_FLOOR,
            degenerate: s == 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantGrad {
    pub grad_w: Matrix,
    pub grad_s: f64,
}

/// LSQ gradient scale `g = 1/√(numel · Q_P)`.
pub fn lsq_grad_scale(numel: usize, spec: &QuantSpec) -> f64 {
    1.0 / ((numel as f64) * spec.q_p() as f64).sqrt()
}

/// Straight-through backward pass of [`quantize`].
///
/// `grad_w` is the upstream gradient inside the grid and zero where clamped.
/// `grad_s = g · Σ upstream · ∂ŵ/∂s` with `∂ŵ/∂s = round(v) - v` inside the
/// grid and `Q_N`/`Q_P` outside.
pub fn quantize_backward(upstream: &Matrix, w: &Matrix, spec: &QuantSpec) -> Result<QuantGrad, QuantError> {
    upstream.ensure_same_shape(w)?;
    let (qn, qp) = (spec.q_n() as f64, spec.q_p() as f64);
    let mut grad_w = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for (&u, &x) in upstream.data().iter().zip(w.data()) {
        let v = x / spec.scale;
        if v < qn {
            grad_w.push(0.0);
            acc += u * qn;
        } else if v > qp {
            grad_w.push(0.0);
            acc += u * qp;
        } else {
            grad_w.push(u);
            acc += u * (round_half_even(v) - v);
        }
    }
    Ok(QuantGrad {
        grad_w: Matrix::from_vec_unchecked(w.rows(), w.cols(), grad_w),
        grad_s: acc * lsq_grad_scale(w.len(), spec),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rand_matrix, Distribution, Rng};

    #[test]
    fn fast_rounding_matches_std() {
        let mut rng = Rng::new(5);
        let mut cases = vec![0.5, 1.5, 2.5, -0.5, -2.5, -0.3, 0.0, -0.0, 4.5e15, -7.0e300, f64::MAX];
        cases.extend((0..10_000).map(|_| rng.uniform_range(-40.0, 40.0)));
        cases.extend((0..1000).map(|i| i as f64 * 0.5 - 250.0));
        for v in cases {
            assert_eq!(round_half_even(v).to_bits(), v.round_ties_even().to_bits(), "{v}");
        }
        assert!(round_half_even(f64::NAN).is_nan());
    }

    #[test]
    fn ranges() {
        let w4 = QuantSpec::weight(4, 1.0).unwrap();
        assert_eq!((w4.q_n(), w4.q_p()), (-8, 7));
        let a4 = QuantSpec::activation(4, 1.0).unwrap();
        assert_eq!((a4.q_n(), a4.q_p()), (0, 15));
        let a4h = a4.with_unsigned_range(UnsignedRange::Half);
        assert_eq!(a4h.q_p(), 8);
        assert!(matches!(QuantSpec::weight(5, 1.0), Err(QuantError::Bits(5))));
        assert!(matches!(QuantSpec::weight(4, 0.0), Err(QuantError::Scale(_))));
        assert!(matches!(QuantSpec::weight(4, -1.0), Err(QuantError::Scale(_))));
    }

    #[test]
    fn quantize_examples() {
        let spec = QuantSpec::weight(4, 1.0).unwrap();
        let r = quantize(&Matrix::new(1, 2, vec![3.4, 100.0]).unwrap(), &spec);
        assert_eq!(r.values.data(), &[3.0, 7.0]);
        assert_eq!(r.codes.data(), &[3, 7]);
        assert_eq!(r.clamp_mask.bits(), &[false, true]);

        let spec = QuantSpec::weight(2, 0.1).unwrap();
        let r = quantize(&Matrix::new(1, 2, vec![0.25, -0.31]).unwrap(), &spec);
        // 0.25/0.1 = 2.5 → ties to 2 → clamped to Q_P = 1.
        assert_eq!(r.codes.data(), &[1, -2]);
        assert_eq!(r.values.data(), &[0.1, -0.2]);
    }

    #[test]
    fn half_even_ties() {
        let spec = QuantSpec::weight(8, 1.0).unwrap();
        let r = quantize(&Matrix::new(1, 4, vec![0.5, 1.5, 2.5, -2.5]).unwrap(), &spec);
        assert_eq!(r.codes.data(), &[0, 2, 2, -2]);
    }

    #[test]
    fn init_scale_examples() {
        let spec = QuantSpec::weight(4, 1.0).unwrap();
        let s = init_scale(&Matrix::filled(3, 3, 1.0), &spec).unwrap();
        assert!((s.scale - 2.0 / 7f64.sqrt()).abs() < 1e-15);
        assert!((s.scale - 0.7559).abs() < 1e-4);
        assert!(!s.degenerate);

        let z = init_scale(&Matrix::zeros(2, 2), &spec).unwrap();
        assert_eq!(z.scale, SCALE_FLOOR);
        assert!(z.degenerate);

        let w = rand_matrix(&mut Rng::new(1), 4, 4, Distribution::Gaussian);
        let s1 = init_scale(&w, &spec).unwrap().scale;
        let s3 = init_scale(&w.scale(3.0), &spec).unwrap().scale;
        assert!((s3 - 3.0 * s1).abs() <= 1e-12 * s3);

        assert!(init_scale(&Matrix::zeros(0, 0), &spec).is_err());
    }

    #[test]
    fn backward_regions() {
        let spec = QuantSpec::weight(4, 1.0).unwrap();
        let w = Matrix::new(1, 3, vec![0.3, -2.2, 6.9]).unwrap();
        let up = Matrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let g = quantize_backward(&up, &w, &spec).unwrap();
        assert_eq!(g.grad_w, up);

        let sat = Matrix::new(1, 3, vec![50.0, -50.0, 9.0]).unwrap();
        let g = quantize_backward(&up, &sat, &spec).unwrap();
        assert_eq!(g.grad_w.data(), &[0.0, 0.0, 0.0]);
        let gs = lsq_grad_scale(3, &spec);
        assert!((g.grad_s - gs * (7.0 - 16.0 + 21.0)).abs() < 1e-12);

        assert!(quantize_backward(&Matrix::zeros(1, 2), &w, &spec).is_err());
    }

    /// Scale gradient against central differences of the straight-through
    /// surrogate `Σ u · s · (w/s + r)`, where the rounding residual `r` is
    /// frozen at the evaluation point (clamped entries use `s · Q`).
    #[test]
    fn scale_gradient_matches_finite_differences() {
        let mut rng = Rng::new(77);
        for trial in 0..10 {
            let w = rand_matrix(&mut rng, 16, 16, Distribution::Gaussian);
            let up = rand_matrix(&mut rng, 16, 16, Distribution::Gaussian);
            let bits = [2u8, 4, 8][trial % 3];
            let s0 = init_scale(&w, &QuantSpec::weight(bits, 1.0).unwrap()).unwrap().scale;
            let spec = QuantSpec::weight(bits, s0).unwrap();
            let (qn, qp) = (spec.q_n() as f64, spec.q_p() as f64);
            let frozen: Vec<Option<f64>> = w
                .data()
                .iter()
                .map(|&x| {
                    let v = x / s0;
                    (qn..=qp).contains(&v).then(|| v.round_ties_even() - v)
                })
                .collect();
            let surrogate = |s: f64| -> f64 {
                w.data()
                    .iter()
                    .zip(up.data())
                    .zip(&frozen)
                    .map(|((&x, &u), r)| match r {
                        Some(r) => u * s * (x / s + r),
                        None if x / s0 < qn => u * s * qn,
                        None => u * s * qp,
                    })
                    .sum()
            };
            let h = 1e-6;
            let fd = (surrogate(s0 + h) - surrogate(s0 - h)) / (2.0 * h);
            let expected = fd * lsq_grad_scale(w.len(), &spec);
            let got = quantize_backward(&up, &w, &spec).unwrap().grad_s;
            let rel = (got - expected).abs() / expected.abs().max(1e-12);
            assert!(rel <= 1e-5, "trial {trial}: {got} vs {expected} (rel {rel})");
        }
    }
}
