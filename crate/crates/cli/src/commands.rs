use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use spatpca::covariance::covariance_matrix;
use spatpca::linalg::{sample_covariance, sym_eigen};
use spatpca::simharness::{run_experiment, summarize, ExperimentSpec, LossRecord};
use spatpca::solver::Gram;
use spatpca::tps::{build_penalty, evaluate_many};
use spatpca::tuning::{
    cv_gamma, cv_tau, partition_folds, refit_selected, tune_and_fit, GammaCvReport, GammaRange, Method,
    PipelineOptions, TauCvReport, TuningGrid,
};
use spatpca::{SolverConfig, Variant};

use crate::error::CliError;
use crate::ingest::{ingest, IngestOptions, Ingested};
use crate::model::{sha256_file, write_atomic, ModelFile, Provenance};

/// Process exit status when the solver hit its iteration limit.
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "spatpca", version, about = "Regularized spatial PCA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit eigenfunctions and covariance parameters and write a model file.
    Fit(FitArgs),
    /// Evaluate a fitted model at query points.
    Eval(EvalArgs),
    /// Sample eigenvalues for a scree plot.
    Scree(ScreeArgs),
    /// Run simulation experiments from a JSON spec.
    Simulate(SimulateArgs),
    /// Cross-validation surfaces only.
    Cv(FitArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    ClosedForm,
    LassoInner,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::ClosedForm => Variant::ClosedForm,
            VariantArg::LassoInner => Variant::LassoInner,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GammaRangeArg {
    /// 0 plus log-spaced values from 1 to the top projected eigenvalue.
    Unit,
    /// 0 plus log-spaced values over three decades below the top projected eigenvalue.
    Relative,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Observations x sites CSV; empty or NA cells mark missing values.
    #[arg(long)]
    pub data: PathBuf,
    /// One row of coordinates per site column.
    #[arg(long)]
    pub locations: PathBuf,
    /// Subtract column means.
    #[arg(long)]
    pub center: bool,
    /// Subtract per-column means of rows sharing the same phase of this period.
    #[arg(long, value_name = "PERIOD")]
    pub deseasonalize: Option<usize>,
}

impl DataArgs {
    fn options(&self) -> IngestOptions {
        IngestOptions {
            center: self.center,
            deseasonalize: self.deseasonalize,
        }
    }

    fn load(&self) -> Result<Ingested, CliError> {
        ingest(&self.data, &self.locations, self.options())
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of eigenfunctions.
    #[arg(long)]
    pub k: usize,
    /// Smoothness weight; cross-validated when absent.
    #[arg(long)]
    pub tau1: Option<f64>,
    /// Sparseness weight; cross-validated when absent.
    #[arg(long)]
    pub tau2: Option<f64>,
    /// Eigenvalue shrinkage; cross-validated when absent.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "closed-form")]
    pub variant: VariantArg,
    #[arg(long, value_enum, default_value = "unit")]
    pub gamma_range: GammaRangeArg,
    #[arg(long, default_value_t = 1000)]
    pub max_iterations: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV of query coordinates, one point per row.
    #[arg(long, conflicts_with = "grid")]
    pub query: Option<PathBuf>,
    /// Regular grid `lo:hi:count` applied on every axis.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<String>,
    /// Reference point `x[,y[,z]]` for a covariance column.
    #[arg(long, allow_hyphen_values = true)]
    pub r#ref: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScreeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON experiment spec, or an array of specs.
    #[arg(long)]
    pub spec: PathBuf,
    /// Overrides the replicate count of every spec.
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Output directory for `records.csv` and `summary.json`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Scree(a) => cmd_scree(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Cv(a) => cmd_cv(&a),
    }
}

fn check_weight(name: &str, v: Option<f64>) -> Result<(), CliError> {
    match v {
        Some(x) if !(x >= 0.0 && x.is_finite()) => {
            Err(CliError::Usage(format!("--{name} must be finite and nonnegative, got {x}")))
        }
        _ => Ok(()),
    }
}

fn grid_for(a: &FitArgs) -> TuningGrid {
    let mut grid = TuningGrid {
        folds: a.folds,
        gamma_range: match a.gamma_range {
            GammaRangeArg::Unit => GammaRange::UnitToTop,
            GammaRangeArg::Relative => GammaRange::RelativeToTop(1e-3),
        },
        ..TuningGrid::default()
    };
    if let Some(t) = a.tau1 {
        grid.tau1_values = vec![t];
    }
    if let Some(t) = a.tau2 {
        grid.tau2_values = vec![t];
    }
    grid
}

fn base_config(a: &FitArgs) -> SolverConfig {
    let mut cfg = SolverConfig::new(0.0, 0.0, a.k).with_variant(a.variant.into());
    cfg.max_iterations = a.max_iterations;
    cfg
}

fn validate_fit_args(a: &FitArgs) -> Result<(), CliError> {
    check_weight("tau1", a.tau1)?;
    check_weight("tau2", a.tau2)?;
    check_weight("gamma", a.gamma)?;
    if a.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    if a.max_iterations == 0 {
        return Err(CliError::Usage("--max-iterations must be at least 1".into()));
    }
    Ok(())
}

fn provenance(a: &FitArgs, data: &Ingested) -> Result<Provenance, CliError> {
    Ok(Provenance {
        data_sha256: sha256_file(&a.data.data)?,
        locations_sha256: sha256_file(&a.data.locations)?,
        seed: a.seed,
        folds: a.folds,
        ingest: a.data.options(),
        ingest_report: data.report.clone(),
        tau_cv: None,
        gamma_cv: None,
    })
}

pub fn cmd_fit(a: &FitArgs) -> Result<i32, CliError> {
    validate_fit_args(a)?;
    let data = a.data.load()?;
    let penalty = build_penalty(&data.domain)?;
    let opts = PipelineOptions {
        base: base_config(a),
        grid: grid_for(a),
        method: Method::Spatpca,
        fixed_tau: a.tau1.zip(a.tau2),
        fixed_gamma: a.gamma,
        seed: a.seed,
    };
    let fitted = tune_and_fit(&data.y, &penalty, &opts)?;
    let mut prov = provenance(a, &data)?;
    prov.tau_cv = fitted.tau_report;
    prov.gamma_cv = fitted.gamma_report;
    let model = ModelFile::new(&data.domain, &fitted.basis, Some(&fitted.covariance), prov);
    write_atomic(&a.out, model.to_json()?.as_bytes())?;
    print!("{}", fit_summary(&model));
    if fitted.basis.converged {
        Ok(0)
    } else {
        eprintln!("warning: solver stopped at the iteration limit; the model is flagged as not converged");
        Ok(EXIT_NOT_CONVERGED)
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6e}")).collect::<Vec<_>>().join(" ")
}

pub fn fit_summary(m: &ModelFile) -> String {
    let b = &m.basis;
    let mut s = String::new();
    let _ = writeln!(s, "sites           {} (dropped {})", m.provenance.ingest_report.kept_sites, m.provenance.ingest_report.dropped_sites.len());
    let _ = writeln!(s, "K               {}", b.phi.len());
    let _ = writeln!(s, "tau1            {}", b.config.tau1);
    let _ = writeln!(s, "tau2            {}", b.config.tau2);
    let _ = writeln!(s, "sample var      {}", join(&b.sample_variances));
    let _ = writeln!(s, "iterations      {}", b.iterations);
    let _ = writeln!(s, "converged       {}", b.converged);
    if let Some(c) = &m.covariance {
        let _ = writeln!(s, "gamma           {}", c.gamma);
        let _ = writeln!(s, "sigma2          {:.6e}", c.sigma2);
        let _ = writeln!(s, "lambda*         {}", join(&c.lambda_star));
        let _ = writeln!(s, "L               {}", c.lhat);
    }
    s
}

fn parse_grid(spec: &str, d: usize) -> Result<DMatrix<f64>, CliError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || CliError::Usage(format!("--grid expects lo:hi:count, got {spec:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if count < 2 || !(lo < hi) {
        return Err(bad());
    }
    let axis: Vec<f64> = (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect();
    let total = count.pow(d as u32);
    // First coordinate varies fastest.
    Ok(DMatrix::from_fn(total, d, |i, c| axis[(i / count.pow(c as u32)) % count]))
}

fn parse_point(spec: &str, d: usize) -> Result<Vec<f64>, CliError> {
    let v: Vec<f64> = spec
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--ref expects {d} comma-separated numbers, got {spec:?}")))?;
    if v.len() != d {
        return Err(CliError::Usage(format!("--ref expects {d} coordinates, got {}", v.len())));
    }
    Ok(v)
}

fn read_query(path: &Path, d: usize) -> Result<DMatrix<f64>, CliError> {
    let rows = crate::ingest::read_table(path)?;
    if rows.is_empty() || rows[0].len() != d {
        return Err(CliError::Input(format!("{}: query points need {d} coordinates per row", path.display())));
    }
    if rows.iter().flatten().any(Option::is_none) {
        return Err(CliError::Input(format!("{}: query points must not have missing cells", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j].expect("checked above")))
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, CliError> {
    w.into_inner().map_err(|e| CliError::Internal(e.to_string()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Internal(e.to_string())
}

fn num(x: f64) -> String {
    format!("{x}")
}

pub fn cmd_eval(a: &EvalArgs) -> Result<i32, CliError> {
    let model = ModelFile::load(&a.model)?;
    let domain = model.domain()?;
    let basis = model.basis()?;
    let cov = model.covariance()?;
    let d = domain.dim();
    let query = match (&a.query, &a.grid) {
        (Some(q), _) => read_query(q, d)?,
        (None, Some(g)) => parse_grid(g, d)?,
        (None, None) => domain.locations().clone(),
    };
    let reference = a.r#ref.as_deref().map(|r| parse_point(r, d)).transpose()?;
    if reference.is_some() && cov.is_none() {
        return Err(CliError::Usage(
            "--ref needs a covariance estimate; refit without skipping the covariance step".into(),
        ));
    }

    let values = evaluate_many(&basis.splines, &domain, &query)?;
    let rotated = cov.as_ref().map(|c| &values * &c.params.vhat);
    let cov_col = match (&cov, &reference) {
        (Some(c), Some(r)) => {
            let rm = DMatrix::from_row_slice(1, d, r);
            Some(covariance_matrix(c, &domain, &query, &rm)?)
        }
        _ => None,
    };

    let k = basis.k();
    let mut w = csv_writer();
    let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    header.extend((1..=k).map(|i| format!("phi{i}")));
    if rotated.is_some() {
        header.extend((1..=k).map(|i| format!("phistar{i}")));
    }
    if cov_col.is_some() {
        header.push("cov_ref".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..query.nrows() {
        let mut row: Vec<String> = (0..d).map(|c| num(query[(i, c)])).collect();
        row.extend((0..k).map(|j| num(values[(i, j)])));
        if let Some(r) = &rotated {
            row.extend((0..k).map(|j| num(r[(i, j)])));
        }
        if let Some(c) = &cov_col {
            row.push(num(c[(i, 0)]));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    write_atomic(&a.out, &finish_csv(w)?)?;
    Ok(0)
}

pub fn cmd_scree(a: &ScreeArgs) -> Result<i32, CliError> {
    let data = a.data.load()?;
    let s = sample_covariance(&data.y);
    let eig = sym_eigen(&s)?;
    let values: Vec<f64> = eig.values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = values.iter().sum();
    let mut w = csv_writer();
    w.write_record(["index", "eigenvalue", "fraction", "cumulative"]).map_err(csv_err)?;
    let mut cum = 0.0;
    for (i, v) in values.iter().enumerate() {
        let frac = if total > 0.0 { v / total } else { 0.0 };
        cum += frac;
        w.write_record([format!("{}", i + 1), num(*v), num(frac), num(cum)]).map_err(csv_err)?;
    }
    write_atomic(&a.out, &finish_csv(w)?)?;
    Ok(0)
}

/// Reads one spec or an array of specs.
pub fn parse_specs(text: &str) -> Result<Vec<ExperimentSpec>, CliError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Input(format!("spec: {e}")))?;
    let specs: Vec<ExperimentSpec> = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|s| vec![s])
    }
    .map_err(|e| CliError::Input(format!("spec: {e}")))?;
    if specs.is_empty() {
        return Err(CliError::Input("spec: no experiments".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate().map_err(|e| CliError::Input(format!("spec {}: {e}", i + 1)))?;
    }
    Ok(specs)
}

fn records_csv(records: &[LossRecord]) -> Result<Vec<u8>, CliError> {
    let mut w = csv_writer();
    w.write_record([
        "method", "lambda1", "lambda2", "k", "replicate", "lossPhi", "lossCov", "tau1", "tau2", "gamma",
        "converged", "error",
    ])
    .map_err(csv_err)?;
    for r in records {
        let t = r.selected_tuning;
        let opt = |f: fn(&spatpca::simharness::SelectedTuning) -> f64| t.as_ref().map(|t| num(f(t))).unwrap_or_default();
        w.write_record([
            r.method.name().to_string(),
            num(r.eigenvalues[0]),
            num(r.eigenvalues[1]),
            r.k.to_string(),
            r.replicate.to_string(),
            num(r.loss_phi),
            num(r.loss_cov),
            opt(|t| t.tau1),
            opt(|t| t.tau2),
            opt(|t| t.gamma),
            r.converged.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<i32, CliError> {
    let text = std::fs::read_to_string(&a.spec).map_err(|e| CliError::Input(format!("{}: {e}", a.spec.display())))?;
    let mut specs = parse_specs(&text)?;
    if let Some(r) = a.replicates {
        if r == 0 {
            return Err(CliError::Usage("--replicates must be at least 1".into()));
        }
        for s in &mut specs {
            s.replicates = r;
        }
    }
    let mut records = Vec::new();
    for s in &specs {
        records.extend(run_experiment(s)?);
    }
    std::fs::create_dir_all(&a.out)?;
    write_atomic(&a.out.join("records.csv"), &records_csv(&records)?)?;
    let summary = summarize(&records);
    let mut json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))?;
    json.push('\n');
    write_atomic(&a.out.join("summary.json"), json.as_bytes())?;
    let failures = records.iter().filter(|r| r.error.is_some()).count();
    if failures > 0 {
        eprintln!("warning: {failures} of {} fits failed; see the error column", records.len());
    }
    Ok(0)
}

#[derive(serde::Serialize)]
#[serde(rename_all = "camelCase")]
struct CvOutput {
    tau: TauCvReport,
    gamma: Option<GammaCvReport>,
}

pub fn cmd_cv(a: &FitArgs) -> Result<i32, CliError> {
    validate_fit_args(a)?;
    let data = a.data.load()?;
    let penalty = build_penalty(&data.domain)?;
    let grid = grid_for(a);
    let base = base_config(a);
    let folds = partition_folds(data.y.nrows(), a.folds, a.seed)?;
    let tau = cv_tau(&data.y, &penalty, &base, &grid, &folds)?;
    let gamma = if a.gamma.is_none() {
        let basis = refit_selected(&Gram::new(&data.y)?, &penalty, &base, &grid, tau.selected)?;
        Some(cv_gamma(&data.y, &basis, &grid, &folds)?)
    } else {
        None
    };
    let mut json = serde_json::to_string_pretty(&CvOutput { tau, gamma })
        .map_err(|e| CliError::Internal(e.to_string()))?;
    json.push('\n');
    write_atomic(&a.out, json.as_bytes())?;
    Ok(0)
}
