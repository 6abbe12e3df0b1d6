//! Metric rows, the CSV dialect, plot-data emission and the seam metric.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::canvas::{Canvas, CanvasStep, PatchGrid};
use crate::distill::StepMetrics;
use crate::error::{CsdError, Result};

/// Columns every metrics file carries, in order.
pub const REQUIRED_COLUMNS: [&str; 6] = [
    "step",
    "eta",
    "t_drawn",
    "mean_grad_norm",
    "mean_pairwise_distance",
    "min_pairwise_distance",
];

/// Mode-specific columns; empty where they do not apply.
pub const OPTIONAL_COLUMNS: [&str; 2] = ["seam_discrepancy", "stein_residual"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub eta: f64,
    pub t_drawn: f64,
    pub mean_grad_norm: f64,
    pub mean_pairwise_distance: f64,
    pub min_pairwise_distance: f64,
    pub seam_discrepancy: Option<f64>,
    pub stein_residual: Option<f64>,
    pub wall_ms: f64,
}

impl From<&StepMetrics> for MetricsRow {
    fn from(m: &StepMetrics) -> Self {
        MetricsRow {
            step: m.step,
            eta: m.eta,
            t_drawn: m.t,
            mean_grad_norm: m.mean_grad_norm,
            mean_pairwise_distance: m.mean_pairwise_distance,
            min_pairwise_distance: m.min_pairwise_distance,
            seam_discrepancy: None,
            stein_residual: None,
            wall_ms: m.wall_ms,
        }
    }
}

impl From<&CanvasStep> for MetricsRow {
    fn from(s: &CanvasStep) -> Self {
        MetricsRow {
            seam_discrepancy: Some(s.seam_discrepancy),
            ..MetricsRow::from(&s.metrics)
        }
    }
}

impl MetricsRow {
    fn reals(&self) -> [(&'static str, Option<f64>); 7] {
        [
            ("eta", Some(self.eta)),
            ("t_drawn", Some(self.t_drawn)),
            ("mean_grad_norm", Some(self.mean_grad_norm)),
            ("mean_pairwise_distance", Some(self.mean_pairwise_distance)),
            ("min_pairwise_distance", Some(self.min_pairwise_distance)),
            ("seam_discrepancy", self.seam_discrepancy),
            ("stein_residual", self.stein_residual),
        ]
    }
}

/// Reals are written with 17 significant digits so they round-trip exactly.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err)
}

fn csv_err(e: csv::Error) -> CsdError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CsdError::Io(io),
        other => CsdError::Protocol(format!("csv: {other:?}")),
    }
}

/// Write `metrics.csv`. Wall-clock time is left out so the file depends only
/// on (config, seed); see [`write_timing_csv`].
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let header: Vec<&str> = REQUIRED_COLUMNS.iter().chain(&OPTIONAL_COLUMNS).copied().collect();
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut record = vec![row.step.to_string()];
        for (name, v) in row.reals() {
            match v {
                Some(v) if !v.is_finite() => {
                    return Err(CsdError::NonFinite {
                        what: if name == "eta" { "eta" } else { "metric" },
                        index: row.step,
                    })
                }
                Some(v) => record.push(format_real(v)),
                None => record.push(String::new()),
            }
        }
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["step", "wall_ms"]).map_err(csv_err)?;
    for row in rows {
        w.write_record([row.step.to_string(), format_real(row.wall_ms)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed metrics file: header plus one optional value per column and row.
#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }
}

fn schema() -> String {
    REQUIRED_COLUMNS.join(",") + " [," + &OPTIONAL_COLUMNS.join(",") + "]"
}

pub fn read_metrics_csv(path: &Path) -> Result<MetricsTable> {
    let mut r = csv::ReaderBuilder::new().from_path(path).map_err(csv_err)?;
    let columns: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let missing: Vec<&str> = REQUIRED_COLUMNS
        .iter()
        .copied()
        .filter(|c| !columns.iter().any(|h| h == c))
        .collect();
    if !missing.is_empty() {
        return Err(CsdError::Protocol(format!(
            "metrics file lacks column(s) {}; expected schema: {}",
            missing.join(", "),
            schema()
        )));
    }
    let mut rows = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = rec
            .iter()
            .map(|f| {
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse::<f64>().map(Some).map_err(|_| {
                        CsdError::Protocol(format!("metrics row {}: `{f}` is not a number", n + 1))
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(MetricsTable { columns, rows })
}

/// Write one `step value` file per metric column into `out_dir`, named
/// `<metric>.dat`. Rows where the metric is empty are skipped.
pub fn emit_plotdata(metrics: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let table = read_metrics_csv(metrics)?;
    fs::create_dir_all(out_dir)?;
    let steps = table.column("step").unwrap();
    let mut written = Vec::new();
    for name in table.columns.iter().filter(|c| *c != "step") {
        let values = table.column(name).unwrap();
        let path = out_dir.join(format!("{name}.dat"));
        let mut f = std::io::BufWriter::new(fs::File::create(&path)?);
        writeln!(f, "# step {name}")?;
        for (s, v) in steps.iter().zip(values) {
            if let (Some(s), Some(v)) = (s, v) {
                writeln!(f, "{} {}", *s as u64, format_real(v))?;
            }
        }
        f.flush()?;
        written.push(path);
    }
    Ok(written)
}

/// Mean squared difference of the edit delta `after - before` between the two
/// cells on either side of every patch boundary, over all channels. Zero when
/// the edit is the same everywhere, or when the grid has no interior boundary.
pub fn seam_discrepancy(before: &Canvas, after: &Canvas, grid: &PatchGrid) -> Result<f64> {
    if !before.same_shape(after) || before.height != grid.height || before.width != grid.width {
        return Err(CsdError::Contract("seam_discrepancy needs canvases matching the grid".into()));
    }
    let delta = |u: usize, v: usize, c: usize| after.get(u, v, c) - before.get(u, v, c);
    let (row_b, col_b) = grid.boundaries();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for c in 0..before.channels {
        for &b in &col_b {
            for u in 0..before.height {
                sum += (delta(u, b - 1, c) - delta(u, b, c)).powi(2);
                pairs += 1;
            }
        }
        for &b in &row_b {
            for v in 0..before.width {
                sum += (delta(b - 1, v, c) - delta(b, v, c)).powi(2);
                pairs += 1;
            }
        }
    }
    Ok(if pairs == 0 { 0.0 } else { sum / pairs as f64 })
}
