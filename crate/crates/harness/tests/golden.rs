//! Seeded one-epoch toy matrix against checked-in CSVs.
//!
//! Regenerate with `SPARQ_BLESS=1 cargo test -p sparq-harness --test golden`.

use std::fs;
use std::path::PathBuf;

use sparq_core::Execution;
use sparq_harness::config::ExperimentConfig;
use sparq_harness::experiment::{full_matrix, run_matrix};

fn toy() -> ExperimentConfig {
    ExperimentConfig::parse(
        "\
name = golden
seed = 7
dataset.classes = 4
dataset.samples = 30
dataset.dim = 16
dataset.noise = 1.0
hidden = 16
epochs = 1
batch_size = 16
",
    )
    .unwrap()
}

fn check(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var_os("SPARQ_BLESS").is_some() {
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{name} drifted from the checked-in copy");
}

#[test]
fn toy_matrix_matches_golden_csvs() {
    let base = toy();
    let seq = run_matrix(&base, &full_matrix(&base), Execution::Sequential).unwrap();
    let par = run_matrix(&base, &full_matrix(&base), Execution::Parallel).unwrap();
    assert_eq!(seq.cells_csv(), par.cells_csv());
    check("toy_matrix_table.csv", &seq.table_csv());
    check("toy_matrix_cells.csv", &seq.cells_csv());
}
