//! Command-line verbs. [`run`] returns the process exit code.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use sparq_core::bounds::{campaign, VectorDist};
use sparq_core::metrics::LayerPair;
use sparq_core::packer::PackedTensor;
use sparq_core::quantizer::init_scale;
use sparq_core::regularizer::RegKind;
use sparq_core::trainer::{self, AwConfig};
use sparq_core::{
    compression_ratio, decode, deviation_report, encode, quantize, sparsify, BlockAxis, Execution, QuantSpec,
    SparsitySpec,
};

use crate::checkpoint::{load_any_matrix, load_state, save_any_matrix, write_run_dir};
use crate::config::{ConfigError, ExperimentConfig};
use crate::dataset::DatasetError;
use crate::experiment::{self, full_matrix, run_matrix, CellResult, RunError};
use crate::plot::{plot, PlotError, PlotKind};

/// Output root for run directories and relative output paths.
pub const OUT_ENV: &str = "SPARQ_OUT";
pub const DEFAULT_OUT: &str = "runs";

pub const EXIT_OK: i32 = 0;
/// Training diverged or another runtime failure.
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sparq", version, about = "N:M sparse low-bit quantization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DistArg {
    Gaussian,
    Uniform,
    HeavyTailed,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration and write its run directory.
    Train { config: PathBuf },
    /// Evaluate a run directory's checkpoint on its test split.
    Eval { run_dir: PathBuf },
    /// Sparsify, quantize and pack a weight matrix into `.sqpk`.
    Pack {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = "2:4")]
        sparsity: SparsitySpec,
        #[arg(long, default_value_t = 4)]
        bits: u8,
        #[arg(long, default_value = "input-dim")]
        axis: BlockAxis,
        #[arg(long)]
        padding: bool,
        /// Fixed scale; LSQ initialization when omitted.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Decode a `.sqpk` file into a dense matrix (`.csv` or binary).
    Unpack {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Cosine / SQNR deviation between two matrices.
    Metrics {
        original: PathBuf,
        compressed: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Seeded bound-check campaign; writes theta, E, L, U, gap rows.
    Bounds {
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        len: usize,
        #[arg(long, value_enum, default_value = "gaussian")]
        dist: DistArg,
        #[arg(long, default_value = "2:4")]
        sparsity: SparsitySpec,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the N:M × bit-width × regularizer matrix for a base config.
    Matrix {
        config: PathBuf,
        /// Restrict N:M patterns, e.g. `2:4,2:8`.
        #[arg(long, value_delimiter = ',')]
        sparsity: Vec<SparsitySpec>,
        /// Restrict bit-widths, e.g. `A4/W4,A2/W2`.
        #[arg(long, value_delimiter = ',')]
        aw: Vec<AwConfig>,
        /// Restrict regularizers, e.g. `none,cosine`.
        #[arg(long, value_delimiter = ',')]
        reg: Vec<RegKind>,
        /// Run cells one after another.
        #[arg(long)]
        sequential: bool,
    },
    /// Render a CSV report as SVG.
    Plot {
        csv: PathBuf,
        #[arg(long)]
        kind: PlotKind,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Failure(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }

    fn inner(&self) -> &anyhow::Error {
        match self {
            CliError::Config(e) | CliError::Data(e) | CliError::Failure(e) => e,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.inner())
    }
}

fn data(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Data(e.into())
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Data(DatasetError::Params(_)) => CliError::Config(e.into()),
            RunError::Data(_) => CliError::Data(e.into()),
            RunError::Train(sparq_core::trainer::TrainError::Config(_)) => CliError::Config(e.into()),
            RunError::Train(_) => CliError::Failure(e.into()),
        }
    }
}

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from)
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::Config)?;
    ExperimentConfig::parse(&text).map_err(|e: ConfigError| CliError::Config(anyhow!("{}: {e}", path.display())))
}

fn run_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    cfg.output
        .as_ref()
        .map_or_else(|| root.join(&cfg.name), |p| resolve(root, p))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(data)?;
    }
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::Data)
}

/// Runs a parsed command, printing a summary to stdout.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    let root = out_root();
    match cli.command {
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let (report, outcome) = experiment::run(&cfg)?;
            let dir = run_dir(&root, &cfg);
            write_run_dir(&dir, &cfg, &report, Some(&outcome)).map_err(CliError::Data)?;
            println!(
                "{}: test accuracy {:.4}, cosine {:.4}, SQNR {} dB -> {}",
                cfg.name,
                report.final_test_accuracy,
                report.deviation.cosine_mean,
                report.deviation.sqnr_db,
                dir.display()
            );
        }
        Command::Eval { run_dir } => {
            let cfg = load_config(&run_dir.join("config.txt"))?;
            let state = load_state(&run_dir.join("checkpoint"), &cfg).map_err(CliError::Data)?;
            let split = experiment::load_split(&cfg).map_err(RunError::from)?;
            let acc = trainer::evaluate(&state, &split.test).map_err(|e| CliError::Data(e.into()))?;
            println!("{acc:.6}");
        }
        Command::Pack {
            input,
            output,
            sparsity,
            bits,
            axis,
            padding,
            scale,
        } => {
            let sspec = sparsity.with_axis(axis).with_padding(padding);
            let w = load_any_matrix(&input).map_err(CliError::Data)?;
            let sparse = sparsify(&w, &sspec).map_err(data)?;
            let probe = QuantSpec::weight(bits, 1.0).map_err(|e| CliError::Config(e.into()))?;
            let s = match scale {
                Some(s) => s,
                None => init_scale(&sparse.values, &probe).map_err(data)?.scale,
            };
            // The header stores the scale as f32.
            let qspec = probe
                .with_scale(s as f32 as f64)
                .map_err(|e| CliError::Config(e.into()))?;
            let q = quantize(&sparse.values, &qspec);
            let packed = encode(&q.codes, &sparse.mask, &sspec, &qspec).map_err(data)?;
            let out = resolve(&root, &output);
            write(&out, packed.to_bytes())?;
            let stats = compression_ratio(sspec.n(), sspec.m(), bits as usize);
            println!(
                "{} bytes, {:.1}x vs dense f32 ({:.2}% saved) -> {}",
                packed.len_bytes(),
                stats.ratio_display(),
                stats.savings_percent_display(),
                out.display()
            );
        }
        Command::Unpack { input, output } => {
            let bytes = fs::read(&input)
                .with_context(|| format!("reading {}", input.display()))
                .map_err(CliError::Data)?;
            let decoded = decode(&PackedTensor::from_bytes(&bytes).map_err(data)?).map_err(data)?;
            let out = resolve(&root, &output);
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(data)?;
            }
            save_any_matrix(&out, &decoded.dequantize()).map_err(CliError::Data)?;
            println!("{}x{} -> {}", decoded.codes.rows(), decoded.codes.cols(), out.display());
        }
        Command::Metrics {
            original,
            compressed,
            output,
        } => {
            let w = load_any_matrix(&original).map_err(CliError::Data)?;
            let h = load_any_matrix(&compressed).map_err(CliError::Data)?;
            let report = deviation_report(&[LayerPair {
                name: "weights",
                original: &w,
                compressed: &h,
            }])
            .map_err(data)?;
            let csv = report.to_csv();
            match output {
                Some(p) => write(&resolve(&root, &p), &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Bounds {
            output,
            count,
            len,
            dist,
            sparsity,
            seed,
        } => {
            let dist = match dist {
                DistArg::Gaussian => VectorDist::Gaussian,
                DistArg::Uniform => VectorDist::Uniform,
                DistArg::HeavyTailed => VectorDist::HeavyTailed,
            };
            if len == 0 || len % sparsity.m() != 0 {
                return Err(CliError::Config(anyhow!(
                    "--len must be a positive multiple of {}",
                    sparsity.m()
                )));
            }
            let summary = campaign(seed, count, len, dist, &sparsity, Execution::best());
            let out = resolve(&root, &output);
            write(&out, summary.to_csv())?;
            println!(
                "{} vectors, {} violations, min cos {:.6}, min energy ratio {:.6} -> {}",
                summary.checks.len(),
                summary.violations.len(),
                summary.min_cos,
                summary.min_energy_ratio,
                out.display()
            );
            if !summary.violations.is_empty() {
                return Err(CliError::Failure(anyhow!(summary.violations.join("\n"))));
            }
        }
        Command::Matrix {
            config,
            sparsity,
            aw,
            reg,
            sequential,
        } => {
            let base = load_config(&config)?;
            let cells: Vec<_> = full_matrix(&base)
                .into_iter()
                .filter(|c| {
                    let s = c.sparsity.expect("matrix cells are sparse");
                    (sparsity.is_empty() || sparsity.iter().any(|f| (f.n(), f.m()) == (s.n(), s.m())))
                        && (aw.is_empty() || aw.contains(&c.aw))
                        && (reg.is_empty() || reg.contains(&c.reg))
                })
                .collect();
            if cells.is_empty() {
                return Err(CliError::Config(anyhow!("no matrix cells match the filters")));
            }
            let exec = if sequential {
                Execution::Sequential
            } else {
                Execution::best()
            };
            let result = run_matrix(&base, &cells, exec)?;
            let dir = run_dir(&root, &base);
            write(&dir.join("config.txt"), base.echo())?;
            write(&dir.join("matrix_table.csv"), result.table_csv())?;
            write(&dir.join("matrix_cells.csv"), result.cells_csv())?;
            let dense_cfg = base.with_cell(None, AwConfig::FULL, RegKind::None);
            let all = std::iter::once((dense_cfg, &result.dense)).chain(
                result
                    .cells
                    .iter()
                    .map(|(c, r)| (base.with_cell(c.sparsity, c.aw, c.reg), r)),
            );
            for (cfg, r) in all {
                let cell_dir = dir.join(&cfg.name);
                match r {
                    CellResult::Done(report) => write_run_dir(&cell_dir, &cfg, report, None).map_err(CliError::Data)?,
                    CellResult::Failed(e) => {
                        write(&cell_dir.join("config.txt"), cfg.echo())?;
                        write(&cell_dir.join("error.txt"), format!("{e}\n"))?;
                    }
                }
            }
            print!("{}", result.table_csv());
            println!("-> {}", dir.display());
        }
        Command::Plot { csv, kind, output } => {
            let text = fs::read_to_string(&csv)
                .with_context(|| format!("reading {}", csv.display()))
                .map_err(CliError::Data)?;
            let svg = plot(&text, kind).map_err(|e: PlotError| CliError::Data(e.into()))?;
            let out = resolve(&root, &output);
            write(&out, svg)?;
            println!("{kind} -> {}", out.display());
        }
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
