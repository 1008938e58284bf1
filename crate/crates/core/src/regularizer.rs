//! Angular alignment regularizer and its L2 ablation baseline.
//!
//! The composed objective is `J = L(Ŵ) + λ · L_reg(W, Ŵ)` with
//! `L_reg = (1/n) Σ_i (1 − cos(w_i, ŵ_i))` over the columns of `W`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{column_cosines, column_stats, cosine_from_stats, MetricsError};
use crate::tensor::{Matrix, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid regularizer setting: {0}")]
    Spec(String),
}

impl From<MetricsError> for RegError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Tensor(t) => RegError::Tensor(t),
            other => RegError::Spec(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum RegKind {
    #[default]
    None,
    L2,
    Cosine,
}

impl fmt::Display for RegKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegKind::None => "none",
            RegKind::L2 => "l2",
            RegKind::Cosine => "cosine",
        })
    }
}

impl FromStr for RegKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(RegKind::None),
            "l2" => Ok(RegKind::L2),
            "cosine" | "slope" => Ok(RegKind::Cosine),
            other => Err(format!("unknown regularizer kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum LambdaMode {
    Fixed,
    /// EMA of the loss ratio, updated every step.
    #[default]
    Auto,
    /// Loss ratio measured on the first step, then held.
    Calibrated,
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LambdaMode::Fixed => "fixed",
            LambdaMode::Auto => "auto",
            LambdaMode::Calibrated => "calibrated",
        })
    }
}

impl FromStr for LambdaMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(LambdaMode::Fixed),
            "auto" | "auto-scale" => Ok(LambdaMode::Auto),
            "calibrated" => Ok(LambdaMode::Calibrated),
            other => Err(format!("unknown lambda mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegSpec {
    pub kind: RegKind,
    pub lambda_mode: LambdaMode,
    /// Used as-is in fixed mode; ignored otherwise.
    pub lambda: f64,
    pub ema_decay: f64,
    /// Treat `Ŵ` as a constant inside `L_reg`.
    pub detach_compressed: bool,
}

impl Default for RegSpec {
    fn default() -> Self {
        Self {
            kind: RegKind::None,
            lambda_mode: LambdaMode::Auto,
            lambda: 1.0,
            ema_decay: 0.99,
            detach_compressed: true,
        }
    }
}

impl RegSpec {
    pub fn cosine() -> Self {
        Self {
            kind: RegKind::Cosine,
            ..Self::default()
        }
    }

    pub fn l2() -> Self {
        Self {
            kind: RegKind::L2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RegError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(RegError::Spec(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(RegError::Spec(format!(
                "ema_decay must be in (0, 1), got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub reg_loss: f64,
    pub lambda_used: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(task_loss: f64, reg_loss: f64, lambda_used: f64) -> Self {
        Self {
            task_loss,
            reg_loss,
            lambda_used,
            total: task_loss + lambda_used * reg_loss,
        }
    }
}

/// Mean angular distance `(1/n) Σ (1 − cos(w_i, ŵ_i))`.
pub fn cos_reg(w: &Matrix, what: &Matrix) -> Result<f64, RegError> {
    if w.cols() == 0 {
        return Err(RegError::Spec("cos_reg needs at least one column".into()));
    }
    let cos = column_cosines(w, what)?;
    Ok(cos.values.iter().map(|c| 1.0 - c).sum::<f64>() / w.cols() as f64)
}

/// Mean squared elementwise difference.
pub fn l2_reg(w: &Matrix, what: &Matrix) -> Result<f64, RegError> {
    w.ensure_same_shape(what)?;
    if w.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = w.data().iter().zip(what.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / w.len() as f64)
}

pub fn reg_value(kind: RegKind, w: &Matrix, what: &Matrix) -> Result<f64, RegError> {
    match kind {
        RegKind::None => {
            w.ensure_same_shape(what)?;
            Ok(0.0)
        }
        RegKind::L2 => l2_reg(w, what),
        RegKind::Cosine => cos_reg(w, what),
    }
}

/// Gradients of `L_reg` with respect to both arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct RegGrad {
    pub wrt_w: Matrix,
    pub wrt_compressed: Matrix,
}

pub fn reg_backward_parts(kind: RegKind, w: &Matrix, what: &Matrix) -> Result<RegGrad, RegError> {
    w.ensure_same_shape(what)?;
    let (rows, cols) = w.shape();
    match kind {
        RegKind::None => Ok(RegGrad {
            wrt_w: Matrix::zeros(rows, cols),
            wrt_compressed: Matrix::zeros(rows, cols),
        }),
        RegKind::L2 => {
            let c = 2.0 / w.len().max(1) as f64;
            let gw = w.zip_map(what, |a, b| c * (a - b))?;
            let gh = gw.scale(-1.0);
            Ok(RegGrad {
                wrt_w: gw,
                wrt_compressed: gh,
            })
        }
        RegKind::Cosine => {
            let mut gw = Matrix::zeros(rows, cols);
            let mut gh = Matrix::zeros(rows, cols);
            let inv_n = 1.0 / cols.max(1) as f64;
            for c in 0..cols {
                let (dot, nw, nh) = column_stats(w, what, c);
                // Zero-norm columns are flagged and excluded.
                if cosine_from_stats(dot, nw, nh).is_none() {
                    continue;
                }
                let (a, b) = (nw.sqrt(), nh.sqrt());
                let ab = a * b;
                let dw = dot / (nw * ab);
                let dh = dot / (nh * ab);
                for r in 0..rows {
                    let i = r * cols + c;
                    let (x, y) = (w.data()[i], what.data()[i]);
                    // d(1 - cos)/dw = -(ŵ/(ab) - dot·w/(a³b))
                    gw.data_mut()[i] = -inv_n * (y / ab - dw * x);
                    gh.data_mut()[i] = -inv_n * (x / ab - dh * y);
                }
            }
            Ok(RegGrad {
                wrt_w: gw,
                wrt_compressed: gh,
            })
        }
    }
}

/// Gradient of the selected regularizer with respect to `W`.
///
/// With `detach_compressed` only the direct path through `W` counts.
/// Otherwise the `Ŵ` path is added with an identity straight-through
/// estimate; the trainer routes that part through its mask and clamp
/// instead of calling this.
pub fn reg_backward(w: &Matrix, what: &Matrix, spec: &RegSpec) -> Result<Matrix, RegError> {
    let g = reg_backward_parts(spec.kind, w, what)?;
    if spec.detach_compressed {
        Ok(g.wrt_w)
    } else {
        Ok(g.wrt_w.zip_map(&g.wrt_compressed, |a, b| a + b)?)
    }
}

pub const LAMBDA_MIN: f64 = 1e-4;
pub const LAMBDA_MAX: f64 = 1e4;
pub const REG_LOSS_FLOOR: f64 = 1e-8;

/// Running state for automatic λ scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaState {
    ema: Option<f64>,
    decay: f64,
}

impl LambdaState {
    pub fn new(decay: f64) -> Self {
        Self { ema: None, decay }
    }

    pub fn ema(&self) -> Option<f64> {
        self.ema
    }
}

impl Default for LambdaState {
    fn default() -> Self {
        Self::new(0.99)
    }
}

/// λ that keeps `λ · reg_loss` on the scale of `task_loss`: an EMA of
/// `task / max(reg, 1e-8)` clamped to `[1e-4, 1e4]`. The first call seeds
/// the EMA with the raw ratio.
pub fn auto_lambda(task_loss: f64, reg_loss: f64, state: &mut LambdaState) -> f64 {
    let ratio = task_loss.max(0.0) / reg_loss.max(REG_LOSS_FLOOR);
    let ema = match state.ema {
        None => ratio,
        Some(prev) => state.decay * prev + (1.0 - state.decay) * ratio,
    };
    state.ema = Some(ema);
    ema.clamp(LAMBDA_MIN, LAMBDA_MAX)
}

/// Per-column `2‖w_i‖²(1 − cos θ_i)`.
pub fn upper_bound(w: &Matrix, what: &Matrix) -> Result<Vec<f64>, RegError> {
    w.ensure_same_shape(what)?;
    Ok((0..w.cols())
        .map(|c| {
            let (dot, nw, nh) = column_stats(w, what, c);
            let cos = cosine_from_stats(dot, nw, nh).unwrap_or(0.0);
            2.0 * nw * (1.0 - cos)
        })
        .collect())
}
