//! Multi-layer perceptron trained with sparse-quantized weights.
//!
//! Every step recomputes `Ŵ = q(S(W); s_w)` per compressed layer (or applies
//! a frozen mask), quantizes layer inputs when activation bits are set,
//! runs `y = Ŵᵀ x̂ + b`, and backpropagates softmax cross-entropy plus
//! `λ · L_reg(W, Ŵ)` through straight-through estimators:
//!
//! * pruned positions receive zero task gradient,
//! * clamped quantizer entries receive zero gradient,
//! * scales `s_w`, `s_x` follow the LSQ scale gradient.
//!
//! The optimizer step is single-threaded. Evaluation splits the dataset into
//! chunks that may run in parallel; the accuracy is an integer count, so the
//! result does not depend on scheduling.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::Execution;
use crate::metrics::{self, DeviationReport, LayerPair, MetricsError};
use crate::quantizer::{init_scale, quantize, quantize_backward, QuantError, QuantSpec, UnsignedRange};
use crate::regularizer::{
    auto_lambda, reg_backward_parts, reg_value, LambdaMode, LambdaState, LossBreakdown, RegError, RegKind, RegSpec,
};
use crate::sparsifier::{mask_apply, sparsify, SparsityError, SparsitySpec};
use crate::tensor::{matmul, matmul_nn, Mask, Matrix, Rng, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Sparsity(#[from] SparsityError),
    #[error(transparent)]
    Reg(#[from] RegError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    None,
    /// Raw logits; softmax is applied inside the loss.
    SoftmaxOut,
}

/// Activation/weight bit-widths, written `A<bits>/W<bits>`; 32 means full
/// precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AwConfig {
    pub act_bits: Option<u8>,
    pub weight_bits: Option<u8>,
}

impl AwConfig {
    pub const FULL: AwConfig = AwConfig {
        act_bits: None,
        weight_bits: None,
    };

    pub fn weights_only(bits: u8) -> Self {
        Self {
            act_bits: None,
            weight_bits: Some(bits),
        }
    }

    pub fn both(bits: u8) -> Self {
        Self {
            act_bits: Some(bits),
            weight_bits: Some(bits),
        }
    }
}

impl fmt::Display for AwConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "A{}/W{}",
            self.act_bits.unwrap_or(32),
            self.weight_bits.unwrap_or(32)
        )
    }
}

impl FromStr for AwConfig {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || format!("expected A<bits>/W<bits>, got `{s}`");
        let (a, w) = s.split_once('/').ok_or_else(err)?;
        let parse = |p: &str, prefix: char| -> Result<Option<u8>, String> {
            let bits: u8 = p.strip_prefix(prefix).ok_or_else(err)?.parse().map_err(|_| err())?;
            match bits {
                32 => Ok(None),
                b if crate::quantizer::SUPPORTED_BITS.contains(&b) => Ok(Some(b)),
                b => Err(format!("unsupported bit-width {b} in `{s}`")),
            }
        };
        Ok(Self {
            act_bits: parse(a.trim(), 'A')?,
            weight_bits: parse(w.trim(), 'W')?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskPolicy {
    RecomputeEachStep,
    /// Masks recompute during the first `warmup_epochs` epochs and are frozen
    /// afterwards.
    FrozenAfterWarmup,
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskPolicy::RecomputeEachStep => "recompute",
            MaskPolicy::FrozenAfterWarmup => "frozen",
        })
    }
}

impl FromStr for MaskPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "recompute" | "recompute-each-step" => Ok(MaskPolicy::RecomputeEachStep),
            "frozen" | "frozen-after-warmup" => Ok(MaskPolicy::FrozenAfterWarmup),
            other => Err(format!("unknown mask policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub reg: RegSpec,
    pub mask_policy: MaskPolicy,
    pub warmup_epochs: usize,
    pub aw: AwConfig,
    pub sparsity: Option<SparsitySpec>,
    pub unsigned_range: UnsignedRange,
    pub keep_dense_first: bool,
    pub keep_dense_last: bool,
    /// Cosine-decay the learning rate to zero over the run.
    pub cosine_lr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
            hidden: vec![128, 128],
            reg: RegSpec::default(),
            mask_policy: MaskPolicy::RecomputeEachStep,
            warmup_epochs: 0,
            aw: AwConfig::FULL,
            sparsity: None,
            unsigned_range: UnsignedRange::Full,
            keep_dense_first: false,
            keep_dense_last: false,
            cosine_lr: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(TrainError::Config("hidden widths must be >= 1".into()));
        }
        self.reg.validate()?;
        Ok(())
    }

    pub fn is_compressed(&self) -> bool {
        self.sparsity.is_some() || self.aw.weight_bits.is_some() || self.aw.act_bits.is_some()
    }
}

/// Samples stored one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>, classes: usize) -> Result<Self, TrainError> {
        if x.rows() != y.len() {
            return Err(TrainError::Config(format!(
                "{} samples but {} labels",
                x.rows(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(TrainError::Config(format!("label {bad} >= {classes} classes")));
        }
        Ok(Self { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Feature-major batch (`dim × indices.len()`).
    pub fn batch(&self, indices: &[usize]) -> Matrix {
        let d = self.dim();
        let b = indices.len();
        let mut data = vec![0.0; d * b];
        for (j, &i) in indices.iter().enumerate() {
            for (f, &v) in self.x.row(i).iter().enumerate() {
                data[f * b + j] = v;
            }
        }
        Matrix::from_vec_unchecked(d, b, data)
    }

    /// SHA-256 over labels and feature bits, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.x.data() {
            h.update(v.to_le_bytes());
        }
        for &c in &self.y {
            h.update((c as u64).to_le_bytes());
        }
        hex_digest(h)
    }
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// Per-layer compression settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCompression {
    pub weight: Option<QuantSpec>,
    /// Quantizer for this layer's input. Signed for the first layer (raw
    /// features), unsigned after ReLU.
    pub input: Option<QuantSpec>,
    pub sparsity: Option<SparsitySpec>,
}

impl LayerCompression {
    pub const NONE: LayerCompression = LayerCompression {
        weight: None,
        input: None,
        sparsity: None,
    };

    pub fn is_weight_compressed(&self) -> bool {
        self.weight.is_some() || self.sparsity.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub compression: LayerCompression,
    /// Set once masks are frozen.
    pub frozen_mask: Option<Mask>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    /// Sparse (pre-quantization) weights and the active mask.
    pub fn sparse_weights(&self) -> Result<(Matrix, Option<Mask>), TrainError> {
        match (&self.frozen_mask, &self.compression.sparsity) {
            (Some(mask), _) => Ok((mask_apply(&self.w, mask)?, Some(mask.clone()))),
            (None, Some(spec)) => {
                let r = sparsify(&self.w, spec)?;
                Ok((r.values, Some(r.mask)))
            }
            (None, None) => Ok((self.w.clone(), None)),
        }
    }

    /// `Ŵ = q(S(W))` as used by the forward pass.
    pub fn compressed_weights(&self) -> Result<Matrix, TrainError> {
        let (sparse, _) = self.sparse_weights()?;
        Ok(match &self.compression.weight {
            Some(q) => quantize(&sparse, q).values,
            None => sparse,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown,
    pub batch_accuracy: f64,
}

pub const STEP_RING: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub layers: Vec<Layer>,
    pub lambda: LambdaState,
    pub recent: VecDeque<StepLog>,
    velocity_w: Vec<Matrix>,
    velocity_b: Vec<Vec<f64>>,
    velocity_sw: Vec<f64>,
    velocity_sx: Vec<f64>,
}

impl TrainState {
    /// He-initialized network for `input_dim → hidden… → classes`.
    pub fn new(config: &TrainConfig, input_dim: usize, classes: usize) -> Result<Self, TrainError> {
        config.validate()?;
        let mut dims = vec![input_dim];
        dims.extend(&config.hidden);
        dims.push(classes);
        let rng = Rng::new(config.seed);
        let mut weights = Vec::new();
        for (l, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut r = rng.fork(l as u64);
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| std * r.gaussian()).collect();
            weights.push((Matrix::new(fan_in, fan_out, data)?, vec![0.0; fan_out]));
        }
        Self::from_weights(config, weights)
    }

    /// Network with given `(W, bias)` per layer, e.g. a dense pre-trained
    /// model to fine-tune.
    pub fn from_weights(config: &TrainConfig, weights: Vec<(Matrix, Vec<f64>)>) -> Result<Self, TrainError> {
        config.validate()?;
        let depth = weights.len();
        if depth == 0 {
            return Err(TrainError::Config("network needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(depth);
        for (l, (w, bias)) in weights.into_iter().enumerate() {
            if bias.len() != w.cols() {
                return Err(TrainError::Config(format!("layer {l}: bias length mismatch")));
            }
            if l > 0 && layers.last().is_some_and(|p: &Layer| p.out_dim() != w.rows()) {
                return Err(TrainError::Config(format!("layer {l}: input width mismatch")));
            }
            let keep_dense = (l == 0 && config.keep_dense_first) || (l == depth - 1 && config.keep_dense_last);
            let compression = if keep_dense {
                LayerCompression::NONE
            } else {
                LayerCompression {
                    weight: config.aw.weight_bits.map(|b| QuantSpec::weight(b, 1.0)).transpose()?,
                    input: config
                        .aw
                        .act_bits
                        .map(|b| {
                            if l == 0 {
                                QuantSpec::weight(b, 1.0)
                            } else {
                                QuantSpec::activation(b, 1.0).map(|q| q.with_unsigned_range(config.unsigned_range))
                            }
                        })
                        .transpose()?,
                    sparsity: config.sparsity,
                }
            };
            layers.push(Layer {
                w,
                bias,
                activation: if l + 1 == depth {
                    Activation::SoftmaxOut
                } else {
                    Activation::Relu
                },
                compression,
                frozen_mask: None,
            });
        }
        let mut state = Self {
            step: 0,
            velocity_w: layers.iter().map(|l| Matrix::zeros(l.in_dim(), l.out_dim())).collect(),
            velocity_b: layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
            velocity_sw: vec![0.0; depth],
            velocity_sx: vec![0.0; depth],
            layers,
            lambda: LambdaState::new(config.reg.ema_decay),
            recent: VecDeque::with_capacity(STEP_RING),
        };
        state.init_weight_scales()?;
        Ok(state)
    }

    /// LSQ initialization of every `s_w` from the current sparse weights.
    pub fn init_weight_scales(&mut self) -> Result<(), TrainError> {
        for layer in &mut self.layers {
            if let Some(q) = layer.compression.weight {
                let (sparse, _) = layer.sparse_weights()?;
                let s = init_scale(&sparse, &q)?.scale;
                layer.compression.weight = Some(q.with_scale(s)?);
            }
        }
        Ok(())
    }

    /// LSQ initialization of every `s_x` from the activations a batch
    /// produces.
    pub fn calibrate_inputs(&mut self, batch: &Matrix) -> Result<(), TrainError> {
        let mut a = batch.clone();
        for l in 0..self.layers.len() {
            if let Some(q) = self.layers[l].compression.input {
                let s = init_scale(&a, &q)?.scale;
                self.layers[l].compression.input = Some(q.with_scale(s)?);
            }
            let layer = &self.layers[l];
            let x = match &layer.compression.input {
                Some(q) => quantize(&a, q).values,
                None => a,
            };
            let z = affine(&layer.compressed_weights()?, &x, &layer.bias)?;
            a = match layer.activation {
                Activation::Relu => z.map(|v| v.max(0.0)),
                _ => z,
            };
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn freeze_masks(&mut self) -> Result<(), TrainError> {
        for layer in &mut self.layers {
            if layer.frozen_mask.is_none() {
                if let Some(spec) = &layer.compression.sparsity {
                    layer.frozen_mask = Some(sparsify(&layer.w, spec)?.mask);
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over all current masks (frozen or recomputed).
    pub fn mask_hash(&self) -> Result<String, TrainError> {
        let mut h = Sha256::new();
        for layer in &self.layers {
            if let (_, Some(mask)) = layer.sparse_weights()? {
                h.update(mask.to_bitset());
            }
        }
        Ok(hex_digest(h))
    }

    /// `(W, Ŵ)` for each layer with compressed weights.
    pub fn compressed_pairs(&self) -> Result<Vec<(String, Matrix, Matrix)>, TrainError> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.compression.is_weight_compressed())
            .map(|(i, l)| Ok((format!("fc{}", i + 1), l.w.clone(), l.compressed_weights()?)))
            .collect()
    }

    pub fn deviation(&self) -> Result<DeviationReport, TrainError> {
        let pairs = if self.layers.iter().any(|l| l.compression.is_weight_compressed()) {
            self.compressed_pairs()?
        } else {
            self.layers
                .iter()
                .enumerate()
                .map(|(i, l)| (format!("fc{}", i + 1), l.w.clone(), l.w.clone()))
                .collect()
        };
        let layer_pairs: Vec<LayerPair<'_>> = pairs
            .iter()
            .map(|(n, w, h)| LayerPair {
                name: n,
                original: w,
                compressed: h,
            })
            .collect();
        Ok(metrics::deviation_report(&layer_pairs)?)
    }

    /// Mean regularizer value over compressed layers.
    pub fn reg_loss(&self, kind: RegKind) -> Result<f64, TrainError> {
        let pairs = self.compressed_pairs()?;
        if pairs.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for (_, w, h) in &pairs {
            total += reg_value(kind, w, h)?;
        }
        Ok(total / pairs.len() as f64)
    }
}

fn affine(w: &Matrix, x: &Matrix, bias: &[f64]) -> Result<Matrix, TensorError> {
    let mut z = matmul(w, x)?;
    let b = x.cols();
    for (i, &bi) in bias.iter().enumerate() {
        for v in &mut z.data_mut()[i * b..(i + 1) * b] {
            *v += bi;
        }
    }
    Ok(z)
}

/// Forward intermediates for one layer.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Layer input before quantization.
    pub input: Matrix,
    pub input_q: Matrix,
    pub sparse_w: Matrix,
    pub mask: Option<Mask>,
    pub compressed_w: Matrix,
    pub pre_activation: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub logits: Matrix,
}

pub fn forward(state: &TrainState, batch: &Matrix) -> Result<(Matrix, ForwardCache), TrainError> {
    if batch.rows() != state.input_dim() {
        return Err(TensorError::Dimension(format!(
            "batch has {} features, network expects {}",
            batch.rows(),
            state.input_dim()
        ))
        .into());
    }
    let mut a = batch.clone();
    let mut caches = Vec::with_capacity(state.layers.len());
    for layer in &state.layers {
        let input_q = match &layer.compression.input {
            Some(q) => quantize(&a, q).values,
            None => a.clone(),
        };
        let (sparse_w, mask) = layer.sparse_weights()?;
        let compressed_w = match &layer.compression.weight {
            Some(q) => quantize(&sparse_w, q).values,
            None => sparse_w.clone(),
        };
        let z = affine(&compressed_w, &input_q, &layer.bias)?;
        let next = match layer.activation {
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::None | Activation::SoftmaxOut => z.clone(),
        };
        caches.push(LayerCache {
            input: a,
            input_q,
            sparse_w,
            mask,
            compressed_w,
            pre_activation: z,
        });
        a = next;
    }
    Ok((
        a.clone(),
        ForwardCache {
            layers: caches,
            logits: a,
        },
    ))
}

/// Column-wise softmax of `classes × batch` logits.
pub fn softmax(logits: &Matrix) -> Matrix {
    let (c, b) = logits.shape();
    let mut out = vec![0.0; c * b];
    for j in 0..b {
        let max = (0..c).map(|i| logits.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..c {
            let e = (logits.get(i, j) - max).exp();
            out[i * b + j] = e;
            sum += e;
        }
        for i in 0..c {
            out[i * b + j] /= sum;
        }
    }
    Matrix::from_vec_unchecked(c, b, out)
}

/// Mean cross-entropy of `classes × batch` logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let (c, b) = logits.shape();
    let mut total = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        let max = (0..c).map(|i| logits.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..c).map(|i| (logits.get(i, j) - max).exp()).sum::<f64>().ln();
        total += lse - logits.get(y, j);
    }
    total / b as f64
}

fn argmax_column(m: &Matrix, j: usize) -> usize {
    let mut best = 0;
    for i in 1..m.rows() {
        if m.get(i, j) > m.get(best, j) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w: Matrix,
    pub bias: Vec<f64>,
    pub scale_w: f64,
    pub scale_x: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub loss: LossBreakdown,
    pub batch_accuracy: f64,
}

/// Backward pass of `J = CE + λ · mean_l L_reg(W_l, Ŵ_l)` with the given λ.
pub fn backward_with_lambda(
    state: &TrainState,
    cache: &ForwardCache,
    labels: &[usize],
    reg: &RegSpec,
    lambda: f64,
) -> Result<Gradients, TrainError> {
    let b = cache.logits.cols();
    if labels.len() != b {
        return Err(TrainError::Config(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let task_loss = cross_entropy(&cache.logits, labels);
    let correct = (0..b).filter(|&j| argmax_column(&cache.logits, j) == labels[j]).count();

    let compressed: Vec<usize> = (0..state.layers.len())
        .filter(|&l| state.layers[l].compression.is_weight_compressed())
        .collect();
    let reg_active = reg.kind != RegKind::None && !compressed.is_empty();
    let mut reg_loss = 0.0;
    if reg_active {
        for &l in &compressed {
            let lc = &cache.layers[l];
            reg_loss += reg_value(reg.kind, &state.layers[l].w, &lc.compressed_w)?;
        }
        reg_loss /= compressed.len() as f64;
    }
    let reg_weight = if reg_active {
        lambda / compressed.len() as f64
    } else {
        0.0
    };

    // dJ/dz for the output layer.
    let probs = softmax(&cache.logits);
    let mut dz = probs;
    for (j, &y) in labels.iter().enumerate() {
        dz.data_mut()[y * b + j] -= 1.0;
    }
    for v in dz.data_mut() {
        *v /= b as f64;
    }

    let mut grads: Vec<Option<LayerGrad>> = vec![None; state.layers.len()];
    for l in (0..state.layers.len()).rev() {
        let layer = &state.layers[l];
        let lc = &cache.layers[l];
        if layer.activation == Activation::Relu {
            dz = dz.zip_map(&lc.pre_activation, |g, z| if z > 0.0 { g } else { 0.0 })?;
        }
        let bias_grad: Vec<f64> = (0..dz.rows()).map(|i| dz.row(i).iter().sum()).collect();
        // dL/dŴ = x̂ · dzᵀ
        let mut d_compressed = matmul_nn(&lc.input_q, &dz.transpose())?;
        let d_input_q = matmul_nn(&lc.compressed_w, &dz)?;

        let mut direct_w = Matrix::zeros(layer.in_dim(), layer.out_dim());
        if reg_active && layer.compression.is_weight_compressed() {
            let g = reg_backward_parts(reg.kind, &layer.w, &lc.compressed_w)?;
            direct_w = g.wrt_w.scale(reg_weight);
            if !reg.detach_compressed {
                d_compressed = d_compressed.zip_map(&g.wrt_compressed, |a, r| a + reg_weight * r)?;
            }
        }

        let (d_sparse, scale_w) = match &layer.compression.weight {
            Some(q) => {
                let g = quantize_backward(&d_compressed, &lc.sparse_w, q)?;
                (g.grad_w, g.grad_s)
            }
            None => (d_compressed, 0.0),
        };
        let d_w_task = match &lc.mask {
            Some(mask) => mask_apply(&d_sparse, mask)?,
            None => d_sparse,
        };
        let w_grad = d_w_task.zip_map(&direct_w, |a, r| a + r)?;

        let (d_input, scale_x) = match &layer.compression.input {
            Some(q) => {
                let g = quantize_backward(&d_input_q, &lc.input, q)?;
                (g.grad_w, g.grad_s)
            }
            None => (d_input_q, 0.0),
        };
        grads[l] = Some(LayerGrad {
            w: w_grad,
            bias: bias_grad,
            scale_w,
            scale_x,
        });
        dz = d_input;
    }

    Ok(Gradients {
        layers: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
        loss: LossBreakdown::new(task_loss, reg_loss, if reg_active { lambda } else { 0.0 }),
        batch_accuracy: correct as f64 / b as f64,
    })
}

/// `J = CE(forward(batch)) + λ · mean_l L_reg(W_l, Ŵ_l)`.
pub fn objective(
    state: &TrainState,
    batch: &Matrix,
    labels: &[usize],
    reg: &RegSpec,
    lambda: f64,
) -> Result<f64, TrainError> {
    let (logits, _) = forward(state, batch)?;
    let task = cross_entropy(&logits, labels);
    if reg.kind == RegKind::None {
        return Ok(task);
    }
    Ok(task + lambda * state.reg_loss(reg.kind)?)
}

/// Backward pass that picks λ from the regularizer spec (fixed, or the
/// current loss-ratio estimate without advancing it).
pub fn backward(
    state: &TrainState,
    cache: &ForwardCache,
    labels: &[usize],
    reg: &RegSpec,
) -> Result<Gradients, TrainError> {
    let lambda = match reg.lambda_mode {
        LambdaMode::Fixed => reg.lambda,
        LambdaMode::Auto | LambdaMode::Calibrated => state.lambda.ema().map_or(1.0, |e| {
            e.clamp(crate::regularizer::LAMBDA_MIN, crate::regularizer::LAMBDA_MAX)
        }),
    };
    backward_with_lambda(state, cache, labels, reg, lambda)
}

/// Scales never go below this after an update.
pub const MIN_SCALE: f64 = 1e-8;

fn sgd_update(param: &mut f64, velocity: &mut f64, grad: f64, lr: f64, momentum: f64) {
    *velocity = momentum * *velocity + grad;
    *param -= lr * *velocity;
}

/// One optimizer step on a batch: forward, λ update, backward, SGD with
/// momentum.
pub fn train_step(
    state: &mut TrainState,
    config: &TrainConfig,
    batch: &Matrix,
    labels: &[usize],
    lr: f64,
) -> Result<StepLog, TrainError> {
    let (_, cache) = forward(state, batch)?;
    let reg = &config.reg;
    let lambda = if reg.kind == RegKind::None {
        0.0
    } else {
        match reg.lambda_mode {
            LambdaMode::Fixed => reg.lambda,
            LambdaMode::Calibrated if state.lambda.ema().is_some() => state.lambda.ema().map_or(0.0, |e| {
                e.clamp(crate::regularizer::LAMBDA_MIN, crate::regularizer::LAMBDA_MAX)
            }),
            LambdaMode::Auto | LambdaMode::Calibrated => {
                let task = cross_entropy(&cache.logits, labels);
                let mut reg_loss = 0.0;
                let mut n = 0;
                for (layer, lc) in state.layers.iter().zip(&cache.layers) {
                    if layer.compression.is_weight_compressed() {
                        reg_loss += reg_value(reg.kind, &layer.w, &lc.compressed_w)?;
                        n += 1;
                    }
                }
                if n == 0 {
                    0.0
                } else {
                    auto_lambda(task, reg_loss / n as f64, &mut state.lambda)
                }
            }
        }
    };
    let grads = backward_with_lambda(state, &cache, labels, reg, lambda)?;
    if !grads.loss.total.is_finite() {
        return Err(TrainError::Diverged {
            epoch: 0,
            step: state.step,
            loss: grads.loss.total,
        });
    }
    let mom = config.momentum;
    for (l, g) in grads.layers.iter().enumerate() {
        let layer = &mut state.layers[l];
        let vw = &mut state.velocity_w[l];
        for ((p, v), &gr) in layer
            .w
            .data_mut()
            .iter_mut()
            .zip(vw.data_mut().iter_mut())
            .zip(g.w.data())
        {
            sgd_update(p, v, gr, lr, mom);
        }
        for ((p, v), &gr) in layer.bias.iter_mut().zip(state.velocity_b[l].iter_mut()).zip(&g.bias) {
            sgd_update(p, v, gr, lr, mom);
        }
        if let Some(q) = layer.compression.weight {
            let mut s = q.scale();
            sgd_update(&mut s, &mut state.velocity_sw[l], g.scale_w, lr, mom);
            layer.compression.weight = Some(q.with_scale(s.max(MIN_SCALE))?);
        }
        if let Some(q) = layer.compression.input {
            let mut s = q.scale();
            sgd_update(&mut s, &mut state.velocity_sx[l], g.scale_x, lr, mom);
            layer.compression.input = Some(q.with_scale(s.max(MIN_SCALE))?);
        }
        if layer.w.data().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Diverged {
                epoch: 0,
                step: state.step,
                loss: f64::NAN,
            });
        }
    }
    let log = StepLog {
        step: state.step,
        loss: grads.loss,
        batch_accuracy: grads.batch_accuracy,
    };
    state.step += 1;
    if state.recent.len() == STEP_RING {
        state.recent.pop_front();
    }
    state.recent.push_back(log);
    Ok(log)
}

/// Fraction of argmax-correct predictions on the compressed forward path.
pub fn evaluate(state: &TrainState, data: &Dataset) -> Result<f64, TrainError> {
    evaluate_with(state, data, Execution::best())
}

pub const EVAL_CHUNK: usize = 256;

pub fn evaluate_with(state: &TrainState, data: &Dataset, exec: Execution) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    // Compress once; each chunk reuses the same weights.
    let mut frozen = state.clone();
    for layer in &mut frozen.layers {
        layer.w = layer.compressed_weights()?;
        layer.compression.weight = None;
        layer.compression.sparsity = None;
        layer.frozen_mask = None;
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let counts = exec.map_chunks(&indices, EVAL_CHUNK, |_, chunk| -> Result<usize, TrainError> {
        let (logits, _) = forward(&frozen, &data.batch(chunk))?;
        Ok(chunk
            .iter()
            .enumerate()
            .filter(|(j, &i)| argmax_column(&logits, *j) == data.y[i])
            .count())
    });
    let mut correct = 0;
    for c in counts {
        correct += c?;
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub task_loss: f64,
    pub reg_loss: f64,
    pub lambda: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub cosine_mean: f64,
    pub sqnr_db: metrics::Sqnr,
    pub mask_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
    pub deviation: DeviationReport,
}

pub const STEP_CSV_HEADER: &str = "step,task_loss,reg_loss,lambda,accuracy";

impl TrainOutcome {
    /// Per-step `step,task_loss,reg_loss,lambda,accuracy` log.
    pub fn step_csv(&self) -> String {
        let mut out = String::from(STEP_CSV_HEADER);
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.6}\n",
                s.step, s.loss.task_loss, s.loss.reg_loss, s.loss.lambda_used, s.batch_accuracy
            ));
        }
        out
    }
}

fn learning_rate(config: &TrainConfig, step: usize, total: usize) -> f64 {
    if !config.cosine_lr || total == 0 {
        return config.lr;
    }
    let t = step as f64 / total as f64;
    config.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Trains from a fresh He-initialized network.
pub fn train(config: &TrainConfig, split: &Split) -> Result<TrainOutcome, TrainError> {
    if split.train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let state = TrainState::new(config, split.train.dim(), split.train.classes)?;
    train_from(config, split, state)
}

/// Trains starting from `state` (e.g. built with
/// [`TrainState::from_weights`] around pre-trained dense weights).
pub fn train_from(config: &TrainConfig, split: &Split, mut state: TrainState) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = split.train.len();
    let bs = config.batch_size.min(n);
    let calib: Vec<usize> = (0..bs).collect();
    state.calibrate_inputs(&split.train.batch(&calib))?;

    let steps_per_epoch = n.div_ceil(bs);
    let total_steps = steps_per_epoch * config.epochs;
    let root = Rng::new(config.seed).fork(0x5EED);
    let mut epochs = Vec::with_capacity(config.epochs + 1);
    let mut steps = Vec::with_capacity(total_steps);
    epochs.push(epoch_log(&state, config, split, 0, None)?);

    for epoch in 1..=config.epochs {
        if config.mask_policy == MaskPolicy::FrozenAfterWarmup && epoch > config.warmup_epochs {
            state.freeze_masks()?;
        }
        let mut order: Vec<usize> = (0..n).collect();
        root.fork(epoch as u64).shuffle(&mut order);
        let (mut task, mut reg, mut lam) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(bs) {
            let batch = split.train.batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| split.train.y[i]).collect();
            let lr = learning_rate(config, state.step, total_steps);
            let log = train_step(&mut state, config, &batch, &labels, lr).map_err(|e| match e {
                TrainError::Diverged { step, loss, .. } => TrainError::Diverged { epoch, step, loss },
                other => other,
            })?;
            task += log.loss.task_loss;
            reg += log.loss.reg_loss;
            lam += log.loss.lambda_used;
            steps.push(log);
        }
        let k = steps_per_epoch as f64;
        epochs.push(epoch_log(
            &state,
            config,
            split,
            epoch,
            Some((task / k, reg / k, lam / k)),
        )?);
    }

    let final_train_accuracy = evaluate(&state, &split.train)?;
    let final_test_accuracy = evaluate(&state, &split.test)?;
    let deviation = state.deviation()?;
    Ok(TrainOutcome {
        state,
        epochs,
        steps,
        final_train_accuracy,
        final_test_accuracy,
        deviation,
    })
}

fn epoch_log(
    state: &TrainState,
    config: &TrainConfig,
    split: &Split,
    epoch: usize,
    losses: Option<(f64, f64, f64)>,
) -> Result<EpochLog, TrainError> {
    let dev = state.deviation()?;
    let (task_loss, reg_loss, lambda) = match losses {
        Some(l) => l,
        None => {
            let all: Vec<usize> = (0..split.train.len().min(1024)).collect();
            let (logits, _) = forward(state, &split.train.batch(&all))?;
            let labels: Vec<usize> = all.iter().map(|&i| split.train.y[i]).collect();
            (cross_entropy(&logits, &labels), state.reg_loss(config.reg.kind)?, 0.0)
        }
    };
    Ok(EpochLog {
        epoch,
        task_loss,
        reg_loss,
        lambda,
        train_accuracy: evaluate(state, &split.train)?,
        test_accuracy: evaluate(state, &split.test)?,
        cosine_mean: dev.cosine_mean,
        sqnr_db: dev.sqnr_db,
        mask_hash: state.mask_hash()?,
    })
}
