//! Run directories: config echo, reports, logs, and weight checkpoints.
//!
//! ```text
//! <run>/config.txt          resolved configuration
//! <run>/report.json         RunReport
//! <run>/epochs.csv          per-epoch series
//! <run>/steps.csv           per-step loss breakdown
//! <run>/deviation.csv       per-layer cosine / SQNR
//! <run>/timing.txt          wall-clock seconds (not part of the report)
//! <run>/checkpoint/fc<k>_w.mtrx, fc<k>_b.mtrx   weights and bias (1×out)
//! <run>/checkpoint/fc<k>_mask.bin               frozen mask bitset, if any
//! <run>/checkpoint/scales.txt                   `fc<k> s_w s_x`, `-` if unused
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use sparq_core::trainer::{TrainOutcome, TrainState};
use sparq_core::{Mask, Matrix};

use crate::config::ExperimentConfig;
use crate::experiment::RunReport;

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    m.write_binary(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Matrix::read_binary(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

/// Loads a matrix by extension: `.csv` as text, anything else as binary.
pub fn load_any_matrix(path: &Path) -> Result<Matrix> {
    if path.extension().is_some_and(|e| e == "csv") {
        let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        Matrix::read_csv(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
    } else {
        read_matrix(path)
    }
}

pub fn save_any_matrix(path: &Path, m: &Matrix) -> Result<()> {
    if path.extension().is_some_and(|e| e == "csv") {
        let mut buf = Vec::new();
        m.write_csv(&mut buf)?;
        fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
    } else {
        write_matrix(path, m)
    }
}

fn write_text(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn save_state(dir: &Path, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut scales = String::new();
    for (i, layer) in state.layers.iter().enumerate() {
        let name = format!("fc{}", i + 1);
        write_matrix(&dir.join(format!("{name}_w.mtrx")), &layer.w)?;
        let bias = Matrix::new(1, layer.bias.len(), layer.bias.clone())?;
        write_matrix(&dir.join(format!("{name}_b.mtrx")), &bias)?;
        if let Some(mask) = &layer.frozen_mask {
            write_text(&dir.join(format!("{name}_mask.bin")), mask.to_bitset())?;
        }
        let fmt = |s: Option<f64>| s.map_or("-".to_string(), |v| format!("{v:?}"));
        scales.push_str(&format!(
            "{name} {} {}\n",
            fmt(layer.compression.weight.map(|q| q.scale())),
            fmt(layer.compression.input.map(|q| q.scale()))
        ));
    }
    write_text(&dir.join("scales.txt"), scales)
}

/// Rebuilds the trained network described by `config` from a checkpoint.
pub fn load_state(dir: &Path, config: &ExperimentConfig) -> Result<TrainState> {
    let scales_path = dir.join("scales.txt");
    let scales = fs::read_to_string(&scales_path).with_context(|| format!("reading {}", scales_path.display()))?;
    let lines: Vec<&str> = scales.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut weights = Vec::with_capacity(lines.len());
    for i in 0..lines.len() {
        let name = format!("fc{}", i + 1);
        let w = read_matrix(&dir.join(format!("{name}_w.mtrx")))?;
        let b = read_matrix(&dir.join(format!("{name}_b.mtrx")))?;
        weights.push((w, b.into_data()));
    }
    let mut state = TrainState::from_weights(&config.train, weights)?;
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 || fields[0] != format!("fc{}", i + 1) {
            bail!("{}: malformed line {}", scales_path.display(), i + 1);
        }
        let parse = |v: &str| -> Result<Option<f64>> {
            if v == "-" {
                Ok(None)
            } else {
                Ok(Some(v.parse().with_context(|| format!("bad scale `{v}`"))?))
            }
        };
        let layer = &mut state.layers[i];
        if let (Some(q), Some(s)) = (layer.compression.weight, parse(fields[1])?) {
            layer.compression.weight = Some(q.with_scale(s)?);
        }
        if let (Some(q), Some(s)) = (layer.compression.input, parse(fields[2])?) {
            layer.compression.input = Some(q.with_scale(s)?);
        }
        let mask_path = dir.join(format!("fc{}_mask.bin", i + 1));
        if mask_path.exists() {
            let bytes = fs::read(&mask_path)?;
            layer.frozen_mask = Some(Mask::from_bitset(layer.in_dim(), layer.out_dim(), &bytes)?);
        }
    }
    Ok(state)
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_run_dir(
    dir: &Path,
    config: &ExperimentConfig,
    report: &RunReport,
    outcome: Option<&TrainOutcome>,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_text(&dir.join("config.txt"), config.echo())?;
    write_text(&dir.join("report.json"), report.to_json())?;
    write_text(&dir.join("epochs.csv"), report.epochs_csv())?;
    write_text(&dir.join("deviation.csv"), report.deviation.to_csv())?;
    write_text(&dir.join("timing.txt"), format!("{:.3}\n", report.wall_clock_s))?;
    if let Some(out) = outcome {
        write_text(&dir.join("steps.csv"), out.step_csv())?;
        save_state(&dir.join("checkpoint"), &out.state)?;
    }
    Ok(())
}
