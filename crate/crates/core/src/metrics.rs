//! Deviation between full-precision and compressed weights.
//!
//! Cosines are taken per column `w_i`. A column with zero norm in either
//! argument gets cosine 0 and is flagged. Layer aggregates are unweighted
//! mean and population standard deviation across layers.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Matrix, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("deviation report needs at least one layer")]
    NoLayers,
    #[error("signal energy is zero while noise is not; SQNR is -inf")]
    ZeroSignal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnCosines {
    pub values: Vec<f64>,
    /// Columns where either side had zero norm.
    pub flagged: Vec<bool>,
}

impl ColumnCosines {
    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }
}

#[inline]
pub(crate) fn column_stats(w: &Matrix, what: &Matrix, col: usize) -> (f64, f64, f64) {
    let (mut dot, mut nw, mut nh) = (0.0, 0.0, 0.0);
    for r in 0..w.rows() {
        let a = w.get(r, col);
        let b = what.get(r, col);
        dot += a * b;
        nw += a * a;
        nh += b * b;
    }
    (dot, nw, nh)
}

/// Cosine from `(w·ŵ, ‖w‖², ‖ŵ‖²)`, clamped to `[-1, 1]`. `None` when a norm
/// is zero.
#[inline]
pub fn cosine_from_stats(dot: f64, nw: f64, nh: f64) -> Option<f64> {
    if nw == 0.0 || nh == 0.0 {
        None
    } else {
        Some((dot / (nw * nh).sqrt()).clamp(-1.0, 1.0))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    cosine_from_stats(dot, na, nb)
}

pub fn column_cosines(w: &Matrix, what: &Matrix) -> Result<ColumnCosines, MetricsError> {
    w.ensure_same_shape(what)?;
    let mut values = Vec::with_capacity(w.cols());
    let mut flagged = Vec::with_capacity(w.cols());
    for c in 0..w.cols() {
        let (dot, nw, nh) = column_stats(w, what, c);
        match cosine_from_stats(dot, nw, nh) {
            Some(v) => {
                values.push(v);
                flagged.push(false);
            }
            None => {
                values.push(0.0);
                flagged.push(true);
            }
        }
    }
    Ok(ColumnCosines { values, flagged })
}

/// SQNR in decibels; `Infinite` when the noise energy is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sqnr {
    Db(f64),
    Infinite,
}

impl Sqnr {
    pub fn db(&self) -> Option<f64> {
        match self {
            Sqnr::Db(v) => Some(*v),
            Sqnr::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Sqnr::Infinite)
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        match s.trim() {
            "inf" => Ok(Sqnr::Infinite),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Sqnr::Db)
                .ok_or_else(|| format!("bad SQNR value `{other}`")),
        }
    }
}

impl fmt::Display for Sqnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sqnr::Db(v) => write!(f, "{v}"),
            Sqnr::Infinite => f.write_str("inf"),
        }
    }
}

impl PartialOrd for Sqnr {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        use std::cmp::Ordering::*;
        match (self, other) {
            (Sqnr::Infinite, Sqnr::Infinite) => Some(Equal),
            (Sqnr::Infinite, _) => Some(Greater),
            (_, Sqnr::Infinite) => Some(Less),
            (Sqnr::Db(a), Sqnr::Db(b)) => a.partial_cmp(b),
        }
    }
}

impl Serialize for Sqnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Sqnr::Db(v) => s.serialize_f64(*v),
            Sqnr::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Sqnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Sqnr::Db(v)),
            Raw::Str(s) => Sqnr::parse(&s).map_err(serde::de::Error::custom),
        }
    }
}

/// `10·log10(mean_i ‖w_i‖² / mean_i ‖w_i − ŵ_i‖²)`.
pub fn sqnr_db(w: &Matrix, what: &Matrix) -> Result<Sqnr, MetricsError> {
    w.ensure_same_shape(what)?;
    let signal = w.frobenius_sq();
    let noise: f64 = w.data().iter().zip(what.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    // The 1/n factors cancel.
    if noise == 0.0 {
        Ok(Sqnr::Infinite)
    } else if signal == 0.0 {
        Err(MetricsError::ZeroSignal)
    } else {
        Ok(Sqnr::Db(10.0 * (signal / noise).log10()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDeviation {
    pub name: String,
    pub cosine_mean: f64,
    pub cosine_std: f64,
    pub sqnr_db: Sqnr,
    pub num_columns: usize,
    pub flagged_columns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub cosine_mean: f64,
    pub cosine_std: f64,
    pub sqnr_db: Sqnr,
    /// `None` when some but not all layers have infinite SQNR.
    pub sqnr_std: Option<f64>,
    pub num_columns: usize,
    pub layers: Vec<LayerDeviation>,
}

/// A named `(W, Ŵ)` pair.
pub struct LayerPair<'a> {
    pub name: &'a str,
    pub original: &'a Matrix,
    pub compressed: &'a Matrix,
}

pub fn layer_deviation(name: &str, w: &Matrix, what: &Matrix) -> Result<LayerDeviation, MetricsError> {
    let cos = column_cosines(w, what)?;
    Ok(LayerDeviation {
        name: name.to_string(),
        cosine_mean: mean(&cos.values),
        cosine_std: std_dev(&cos.values),
        sqnr_db: sqnr_db(w, what)?,
        num_columns: w.cols(),
        flagged_columns: cos.flagged.iter().filter(|&&f| f).count(),
    })
}

pub fn deviation_report(layers: &[LayerPair<'_>]) -> Result<DeviationReport, MetricsError> {
    if layers.is_empty() {
        return Err(MetricsError::NoLayers);
    }
    let per_layer = layers
        .iter()
        .map(|l| layer_deviation(l.name, l.original, l.compressed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(per_layer))
}

/// Aggregates already computed per-layer rows.
pub fn aggregate(layers: Vec<LayerDeviation>) -> DeviationReport {
    let cos: Vec<f64> = layers.iter().map(|l| l.cosine_mean).collect();
    let finite: Vec<f64> = layers.iter().filter_map(|l| l.sqnr_db.db()).collect();
    let (sqnr, sqnr_std) = if finite.len() == layers.len() {
        (Sqnr::Db(mean(&finite)), Some(std_dev(&finite)))
    } else if finite.is_empty() {
        (Sqnr::Infinite, Some(0.0))
    } else {
        (Sqnr::Infinite, None)
    };
    DeviationReport {
        cosine_mean: mean(&cos),
        cosine_std: std_dev(&cos),
        sqnr_db: sqnr,
        sqnr_std,
        num_columns: layers.iter().map(|l| l.num_columns).sum(),
        layers,
    }
}

impl DeviationReport {
    pub const CSV_HEADER: &'static str = "layer,cosine_mean,cosine_std,sqnr_db,sqnr_std,num_columns,flagged_columns";

    /// One row per layer, then a `summary` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for l in &self.layers {
            out.push_str(&format!(
                "{},{:.6},{:.6},{},,{},{}\n",
                l.name,
                l.cosine_mean,
                l.cosine_std,
                fmt_sqnr(l.sqnr_db),
                l.num_columns,
                l.flagged_columns
            ));
        }
        out.push_str(&format!(
            "summary,{:.6},{:.6},{},{},{},{}\n",
            self.cosine_mean,
            self.cosine_std,
            fmt_sqnr(self.sqnr_db),
            self.sqnr_std.map_or("-".to_string(), |s| format!("{s:.4}")),
            self.num_columns,
            self.layers.iter().map(|l| l.flagged_columns).sum::<usize>()
        ));
        out
    }
}

pub fn fmt_sqnr(s: Sqnr) -> String {
    match s {
        Sqnr::Db(v) => format!("{v:.4}"),
        Sqnr::Infinite => "inf".into(),
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub(crate) fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}
