#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use spatpca::simharness::{generate, ExperimentSpec};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spatpca"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) {
    let mut s = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

/// Writes `data.csv` and `locations.csv` for one replicate of the 1D experiment.
pub fn experiment_files(dir: &Path, eigenvalues: [f64; 2], replicate: usize) -> (PathBuf, PathBuf) {
    let spec = ExperimentSpec::one_dimensional(eigenvalues, vec![2], 1, 11);
    let y = generate(&spec, replicate).unwrap().y;
    let domain = spec.domain.build(1).unwrap();
    let data = dir.join("data.csv");
    let locs = dir.join("locations.csv");
    write_matrix(&data, &y);
    write_matrix(&locs, domain.locations());
    (data, locs)
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
