//! CSV ingestion: observations are rows, sites are columns, and any site
//! with a missing cell is dropped and reported.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use spatpca::SpatialDomain;

use crate::error::CliError;

/// Tokens read as missing, compared case-insensitively after trimming.
const MISSING_TOKENS: [&str; 5] = ["", "na", "nan", "null", "."];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IngestReport {
    pub total_sites: usize,
    /// Dropped site columns, numbered from 1.
    pub dropped_sites: Vec<usize>,
    pub kept_sites: usize,
    pub observations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IngestOptions {
    pub center: bool,
    pub deseasonalize: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub y: DMatrix<f64>,
    pub domain: SpatialDomain,
    pub report: IngestReport,
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim().to_ascii_lowercase();
    MISSING_TOKENS.contains(&t.as_str())
}

/// Rows of optional numbers. A first row in which no cell is numeric or
/// missing is taken as a header and skipped.
pub fn read_table(path: &Path) -> Result<Vec<Vec<Option<f64>>>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        if rows.is_empty() && line == 0 && record.iter().all(|c| !is_missing(c) && c.parse::<f64>().is_err()) {
            continue;
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(col, cell)| {
                if is_missing(cell) {
                    return Ok(None);
                }
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(Some(v)),
                    _ => Err(CliError::Input(format!(
                        "{}: line {}, column {}: cannot parse {cell:?} as a number",
                        path.display(),
                        line + 1,
                        col + 1
                    ))),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if let Some(first) = rows.first() {
        let width = first.len();
        if let Some(i) = rows.iter().position(|r| r.len() != width) {
            return Err(CliError::Input(format!(
                "{}: row {} has {} cells, expected {width}",
                path.display(),
                i + 1,
                rows[i].len()
            )));
        }
    }
    Ok(rows)
}

/// Keeps the columns without missing cells.
pub fn drop_incomplete_sites(rows: &[Vec<Option<f64>>]) -> (DMatrix<f64>, IngestReport) {
    let n = rows.len();
    let total = rows.first().map_or(0, |r| r.len());
    let (kept, dropped): (Vec<usize>, Vec<usize>) =
        (0..total).partition(|&j| rows.iter().all(|r| r[j].is_some()));
    let y = DMatrix::from_fn(n, kept.len(), |i, j| rows[i][kept[j]].expect("kept columns are complete"));
    let report = IngestReport {
        total_sites: total,
        kept_sites: kept.len(),
        dropped_sites: dropped.into_iter().map(|j| j + 1).collect(),
        observations: n,
    };
    (y, report)
}

/// Subtracts the mean of each column over the rows sharing `row % period`.
pub fn deseasonalize(y: &mut DMatrix<f64>, period: usize) -> Result<(), CliError> {
    if period == 0 || period > y.nrows() {
        return Err(CliError::Usage(format!(
            "seasonal period must be between 1 and the number of observations ({}), got {period}",
            y.nrows()
        )));
    }
    for phase in 0..period {
        let rows: Vec<usize> = (phase..y.nrows()).step_by(period).collect();
        for mut col in y.column_iter_mut() {
            let mean = rows.iter().map(|&i| col[i]).sum::<f64>() / rows.len() as f64;
            for &i in &rows {
                col[i] -= mean;
            }
        }
    }
    Ok(())
}

pub fn center(y: &mut DMatrix<f64>) {
    for mut col in y.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
}

pub fn ingest(data: &Path, locations: &Path, opts: IngestOptions) -> Result<Ingested, CliError> {
    let rows = read_table(data)?;
    if rows.is_empty() {
        return Err(CliError::Input(format!("{}: no observations", data.display())));
    }
    let locs = read_table(locations)?;
    let total = rows[0].len();
    if locs.len() != total {
        return Err(CliError::Input(format!(
            "data has {total} site columns but {} has {} rows",
            locations.display(),
            locs.len()
        )));
    }
    if locs.iter().flatten().any(Option::is_none) {
        return Err(CliError::Input(format!("{}: locations must not have missing cells", locations.display())));
    }

    let (mut y, report) = drop_incomplete_sites(&rows);
    if report.kept_sites == 0 {
        return Err(CliError::Input("every site has a missing value".into()));
    }
    if !report.dropped_sites.is_empty() {
        log::info!("dropped {} of {} sites with missing values", report.dropped_sites.len(), total);
    }
    let d = locs[0].len();
    let kept: Vec<usize> = (0..total).filter(|j| !report.dropped_sites.contains(&(j + 1))).collect();
    let loc_matrix = DMatrix::from_fn(kept.len(), d, |i, c| locs[kept[i]][c].expect("checked above"));
    let domain = SpatialDomain::new(loc_matrix)?;

    if let Some(period) = opts.deseasonalize {
        deseasonalize(&mut y, period)?;
    }
    if opts.center {
        center(&mut y);
    }
    Ok(Ingested { y, domain, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_missing_site_dropped() {
        let rows = vec![
            vec![Some(1.0), None, Some(2.0)],
            vec![Some(3.0), None, Some(4.0)],
        ];
        let (y, report) = drop_incomplete_sites(&rows);
        assert_eq!(report.kept_sites, 2);
        assert_eq!(report.dropped_sites, vec![2]);
        assert_eq!(report.kept_sites + report.dropped_sites.len(), report.total_sites);
        assert_eq!(y, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn centering_constant_column() {
        let mut y = DMatrix::from_row_slice(3, 2, &[5.0, 1.0, 5.0, 2.0, 5.0, 6.0]);
        center(&mut y);
        assert!(y.column(0).iter().all(|v| *v == 0.0));
        assert!(y.column(1).sum().abs() < 1e-15);
    }

    #[test]
    fn periodic_series_deseasonalizes_to_zero() {
        let n = 48;
        let y0 = DMatrix::from_fn(n, 3, |i, j| ((i % 12) as f64).sin() * (j + 1) as f64 + j as f64);
        let mut y = y0.clone();
        deseasonalize(&mut y, 12).unwrap();
        assert!(y.amax() < 1e-12);
    }

    #[test]
    fn bad_period() {
        let mut y = DMatrix::zeros(4, 2);
        assert!(deseasonalize(&mut y, 0).is_err());
        assert!(deseasonalize(&mut y, 5).is_err());
    }

    #[test]
    fn missing_tokens() {
        for t in ["", "NA", " na ", "NaN", "null", "."] {
            assert!(is_missing(t), "{t:?}");
        }
        assert!(!is_missing("0"));
    }
}
