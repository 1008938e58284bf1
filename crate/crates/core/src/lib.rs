//! Structured N:M sparsity combined with low-bit quantization.
//!
//! The crate covers the full compression path for dense weight matrices:
//!
//! * [`sparsifier`]: N:M magnitude pruning with deterministic tie-breaking.
//! * [`quantizer`]: LSQ-style fake quantization and its straight-through
//!   gradients.
//! * [`regularizer`]: the angular (cosine) alignment loss, the L2 baseline
//!   and automatic λ scaling.
//! * [`metrics`]: per-column cosine, SQNR and layer deviation reports.
//! * [`bounds`]: executable checks of the 2:4 error bounds.
//! * [`packer`]: the bit-exact `.sqpk` codec and compression-ratio table.
//! * [`trainer`]: a small MLP trained with sparse-quantized weights.
//!
//! Block-level and sample-level loops go through [`exec::Execution`], which
//! uses rayon when the `parallel` feature is on and produces identical
//! results either way.

pub mod bounds;
pub mod exec;
pub mod metrics;
pub mod packer;
pub mod quantizer;
pub mod regularizer;
pub mod sparsifier;
pub mod tensor;
pub mod trainer;

pub use exec::Execution;
pub use metrics::{column_cosines, deviation_report, sqnr_db, DeviationReport, Sqnr};
pub use packer::{compression_ratio, decode, encode, PackedTensor};
pub use quantizer::{quantize, QuantMode, QuantSpec};
pub use regularizer::{cos_reg, l2_reg, RegKind, RegSpec};
pub use sparsifier::{sparsify, SparsitySpec};
pub use tensor::{BlockAxis, Mask, Matrix, Rng};
