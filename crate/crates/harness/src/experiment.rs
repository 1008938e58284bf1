//! Single runs, the experiment matrix, and their reports.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sparq_core::metrics::{DeviationReport, Sqnr};
use sparq_core::packer::CompressionStats;
use sparq_core::regularizer::RegKind;
use sparq_core::trainer::{self, AwConfig, EpochLog, Split, TrainConfig, TrainError, TrainOutcome, TrainState};
use sparq_core::{compression_ratio, Execution, Matrix, Rng, SparsitySpec};
use thiserror::Error;

use crate::config::{cell_name, ExperimentConfig};
use crate::dataset::{make_dataset, DatasetError};

/// Stream that keeps dataset draws apart from weight initialization.
pub const DATA_STREAM: u64 = 0xDA7A;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub sparsity: String,
    pub awconfig: String,
    pub reg: String,
    pub seed: u64,
    pub train_hash: String,
    pub test_hash: String,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
    pub deviation: DeviationReport,
    pub compression: Option<CompressionStats>,
    pub epochs: Vec<EpochLog>,
    /// Kept out of the serialized form so reports are reproducible.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from(
            "epoch,task_loss,reg_loss,lambda,train_accuracy,test_accuracy,cosine_mean,sqnr_db,mask_hash\n",
        );
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.9},{:.9},{:.9},{:.6},{:.6},{:.9},{},{}",
                e.epoch,
                e.task_loss,
                e.reg_loss,
                e.lambda,
                e.train_accuracy,
                e.test_accuracy,
                e.cosine_mean,
                fmt_sqnr(e.sqnr_db),
                e.mask_hash
            );
        }
        out
    }
}

fn fmt_sqnr(s: Sqnr) -> String {
    match s {
        Sqnr::Db(v) => format!("{v:.6}"),
        Sqnr::Infinite => "inf".into(),
    }
}

/// Storage statistics for the configured weight format; `None` when the
/// weights stay dense 32-bit.
pub fn compression_for(sparsity: Option<&SparsitySpec>, aw: AwConfig) -> Option<CompressionStats> {
    let bits = aw.weight_bits.map_or(32, usize::from);
    match sparsity {
        Some(s) => Some(compression_ratio(s.n(), s.m(), bits)),
        None if bits < 32 => Some(CompressionStats {
            dense_bits: 32,
            packed_bits: bits,
            ratio: 32.0 / bits as f64,
            savings: (32 - bits) as f64 / 32.0,
        }),
        None => None,
    }
}

pub fn load_split(config: &ExperimentConfig) -> Result<Split, DatasetError> {
    make_dataset(config.dataset, &Rng::new(config.seed).fork(DATA_STREAM), &config.data)
}

/// Dense full-precision training config used for pre-training.
pub fn pretrain_config(config: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        epochs: config.pretrain_epochs,
        sparsity: None,
        aw: AwConfig::FULL,
        reg: Default::default(),
        keep_dense_first: false,
        keep_dense_last: false,
        ..config.train.clone()
    }
}

pub type Weights = Vec<(Matrix, Vec<f64>)>;

/// Pre-trained dense weights, or `None` when `pretrain_epochs` is zero.
pub fn pretrain(config: &ExperimentConfig, split: &Split) -> Result<Option<Weights>, TrainError> {
    if config.pretrain_epochs == 0 {
        return Ok(None);
    }
    let out = trainer::train(&pretrain_config(config), split)?;
    Ok(Some(weights_of(&out.state)))
}

pub fn weights_of(state: &TrainState) -> Weights {
    state.layers.iter().map(|l| (l.w.clone(), l.bias.clone())).collect()
}

/// Runs one configuration end to end, including its own pre-training.
pub fn run(config: &ExperimentConfig) -> Result<(RunReport, TrainOutcome), RunError> {
    let split = load_split(config)?;
    let start = Instant::now();
    let init = pretrain(config, &split)?;
    let (mut report, outcome) = run_on(config, &split, init.as_ref())?;
    report.wall_clock_s = start.elapsed().as_secs_f64();
    Ok((report, outcome))
}

/// Trains `config` on `split`, fine-tuning from `init` when given.
pub fn run_on(
    config: &ExperimentConfig,
    split: &Split,
    init: Option<&Weights>,
) -> Result<(RunReport, TrainOutcome), TrainError> {
    let start = Instant::now();
    let outcome = match init {
        Some(w) => {
            let state = TrainState::from_weights(&config.train, w.clone())?;
            trainer::train_from(&config.train, split, state)?
        }
        None => trainer::train(&config.train, split)?,
    };
    let t = &config.train;
    let report = RunReport {
        name: config.name.clone(),
        sparsity: t.sparsity.map_or("dense".into(), |s| s.to_string()),
        awconfig: t.aw.to_string(),
        reg: t.reg.kind.to_string(),
        seed: config.seed,
        train_hash: split.train.fingerprint(),
        test_hash: split.test.fingerprint(),
        final_train_accuracy: outcome.final_train_accuracy,
        final_test_accuracy: outcome.final_test_accuracy,
        deviation: outcome.deviation.clone(),
        compression: compression_for(t.sparsity.as_ref(), t.aw),
        epochs: outcome.epochs.clone(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok((report, outcome))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub sparsity: Option<SparsitySpec>,
    pub aw: AwConfig,
    pub reg: RegKind,
}

impl Cell {
    pub fn name(&self) -> String {
        cell_name(self.sparsity.as_ref(), self.aw, self.reg)
    }
}

pub const MATRIX_SPARSITY: [(usize, usize); 3] = [(2, 4), (2, 8), (2, 16)];
pub const MATRIX_AW: [AwConfig; 4] = [
    AwConfig::FULL,
    AwConfig {
        act_bits: Some(8),
        weight_bits: Some(8),
    },
    AwConfig {
        act_bits: Some(4),
        weight_bits: Some(4),
    },
    AwConfig {
        act_bits: Some(2),
        weight_bits: Some(2),
    },
];
pub const MATRIX_REG: [RegKind; 3] = [RegKind::None, RegKind::L2, RegKind::Cosine];

/// The 3×4×3 grid of N:M patterns, bit-widths, and regularizers, using the
/// block axis and padding of `base`.
pub fn full_matrix(base: &ExperimentConfig) -> Vec<Cell> {
    let (axis, padding) = base
        .train
        .sparsity
        .map_or((Default::default(), false), |s| (s.axis(), s.padding()));
    let mut cells = Vec::new();
    for (n, m) in MATRIX_SPARSITY {
        let spec = SparsitySpec::new(n, m)
            .expect("matrix patterns are valid")
            .with_axis(axis)
            .with_padding(padding);
        for aw in MATRIX_AW {
            for reg in MATRIX_REG {
                cells.push(Cell {
                    sparsity: Some(spec),
                    aw,
                    reg,
                });
            }
        }
    }
    cells
}

#[derive(Debug, Clone)]
pub enum CellResult {
    Done(Box<RunReport>),
    /// Training diverged or failed; shown as "-".
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct MatrixResult {
    pub dense: CellResult,
    pub cells: Vec<(Cell, CellResult)>,
}

/// Runs every cell on the dataset of `base`. Pre-training happens once and
/// is shared, which gives the same result as running each cell's config on
/// its own. A dense full-precision reference run with the same budget is
/// included.
pub fn run_matrix(base: &ExperimentConfig, cells: &[Cell], exec: Execution) -> Result<MatrixResult, RunError> {
    let split = load_split(base)?;
    let init = pretrain(base, &split)?;
    let run_cell = |cfg: ExperimentConfig| match run_on(&cfg, &split, init.as_ref()) {
        Ok((report, _)) => CellResult::Done(Box::new(report)),
        Err(e) => CellResult::Failed(e.to_string()),
    };
    let dense_cell = Cell {
        sparsity: None,
        aw: AwConfig::FULL,
        reg: RegKind::None,
    };
    let results = exec.map_range(cells.len() + 1, |i| {
        let cell = if i == 0 { dense_cell } else { cells[i - 1] };
        run_cell(base.with_cell(cell.sparsity, cell.aw, cell.reg))
    });
    let mut it = results.into_iter();
    let dense = it.next().expect("dense reference present");
    Ok(MatrixResult {
        dense,
        cells: cells.iter().copied().zip(it).collect(),
    })
}

fn aw_label(aw: AwConfig) -> String {
    if aw == AwConfig::FULL {
        "FP".into()
    } else {
        aw.to_string().replace('/', "")
    }
}

/// Header of the wide table: one row per N:M pattern, one column per
/// bit-width and regularizer.
pub fn table_header() -> String {
    let mut cols = vec!["nm".to_string()];
    for aw in MATRIX_AW {
        for reg in MATRIX_REG {
            cols.push(format!("{}_{reg}", aw_label(aw)));
        }
    }
    cols.join(",")
}

fn fmt_accuracy(r: &CellResult) -> String {
    match r {
        CellResult::Done(rep) => format!("{:.2}", 100.0 * rep.final_test_accuracy),
        CellResult::Failed(_) => "-".into(),
    }
}

impl MatrixResult {
    /// Test accuracy (%) laid out like the N:M × bit-width table. Cells that
    /// were not run are empty; failed cells are "-".
    pub fn table_csv(&self) -> String {
        let mut out = table_header();
        out.push('\n');
        let mut rows: Vec<(usize, usize)> = Vec::new();
        for (c, _) in &self.cells {
            if let Some(s) = c.sparsity {
                if !rows.contains(&(s.n(), s.m())) {
                    rows.push((s.n(), s.m()));
                }
            }
        }
        for (n, m) in rows {
            let mut line = vec![format!("{n}:{m}")];
            for aw in MATRIX_AW {
                for reg in MATRIX_REG {
                    let v = self
                        .cells
                        .iter()
                        .find(|(c, _)| {
                            c.sparsity.is_some_and(|s| (s.n(), s.m()) == (n, m)) && c.aw == aw && c.reg == reg
                        })
                        .map_or(String::new(), |(_, r)| fmt_accuracy(r));
                    line.push(v);
                }
            }
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// One row per cell, dense reference first.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from(CELLS_HEADER);
        out.push('\n');
        let dense = Cell {
            sparsity: None,
            aw: AwConfig::FULL,
            reg: RegKind::None,
        };
        for (cell, r) in std::iter::once((&dense, &self.dense)).chain(self.cells.iter().map(|(c, r)| (c, r))) {
            let nm = cell.sparsity.map_or("dense".into(), |s| s.to_string());
            let bits = cell.aw.weight_bits.map_or(32, u32::from);
            match r {
                CellResult::Done(rep) => {
                    let d = &rep.deviation;
                    let (ratio, savings) = rep.compression.map_or(("1.000000".into(), "0.000000".into()), |c| {
                        (format!("{:.6}", c.ratio), format!("{:.6}", 100.0 * c.savings))
                    });
                    let _ = writeln!(
                        out,
                        "{nm},{},{bits},{},ok,{:.6},{:.6},{:.9},{:.9},{},{},{ratio},{savings}",
                        cell.aw,
                        cell.reg,
                        100.0 * rep.final_test_accuracy,
                        100.0 * rep.final_train_accuracy,
                        d.cosine_mean,
                        d.cosine_std,
                        fmt_sqnr(d.sqnr_db),
                        d.sqnr_std.map_or("-".into(), |s| format!("{s:.6}")),
                    );
                }
                CellResult::Failed(_) => {
                    let _ = writeln!(out, "{nm},{},{bits},{},diverged,-,-,-,-,-,-,-,-", cell.aw, cell.reg);
                }
            }
        }
        out
    }
}

pub const CELLS_HEADER: &str = "nm,awconfig,weight_bits,reg,status,test_accuracy,train_accuracy,cosine_mean,cosine_std,sqnr_db,sqnr_std,compression_ratio,savings_percent";
