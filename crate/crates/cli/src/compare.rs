//! Column-wise comparison of two CSV time series.

use std::fmt::Write as _;

use anyhow::{anyhow, bail, Result};

use crate::output::Table;

#[derive(Debug, Clone)]
pub struct CompareOptions {
    /// Bound on the per-column maximum deviation.
    pub tol: Option<f64>,
    /// Required fraction of rows inside `3 sigma` bands, for columns with bands.
    pub coverage: f64,
    pub columns: Option<Vec<String>>,
    pub allow_version_mismatch: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self { tol: None, coverage: 0.95, columns: None, allow_version_mismatch: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnReport {
    pub name: String,
    pub max_deviation: f64,
    /// Fraction of rows within `3 sigma`; `None` without bands.
    pub coverage: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub columns: Vec<ColumnReport>,
}

impl Report {
    pub fn pass(&self) -> bool {
        self.columns.iter().all(|c| c.pass)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("column,max_deviation,coverage,status\n");
        for c in &self.columns {
            let cov = c.coverage.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{},{:.6e},{cov},{}", c.name, c.max_deviation, if c.pass { "pass" } else { "FAIL" });
        }
        let _ = writeln!(s, "overall,{}", if self.pass() { "pass" } else { "FAIL" });
        s
    }
}

fn is_band(name: &str) -> bool {
    name.starts_with("sigma_")
}

pub fn compare(a: &Table, b: &Table, opts: &CompareOptions) -> Result<Report> {
    if a.version != b.version && !opts.allow_version_mismatch {
        bail!("library versions differ ({:?} vs {:?}); pass --allow-version-mismatch to override", a.version, b.version);
    }
    let (ta, tb) = (a.column("t").ok_or_else(|| anyhow!("first file has no t column"))?, b.column("t").ok_or_else(|| anyhow!("second file has no t column"))?);
    if ta.len() != tb.len() || ta.iter().zip(&tb).any(|(x, y)| (x - y).abs() > 1e-9 * x.abs().max(1.0)) {
        bail!("schema mismatch: time grids differ ({} vs {} rows)", ta.len(), tb.len());
    }
    let names: Vec<String> = match &opts.columns {
        Some(cols) => {
            for c in cols {
                if !a.columns.contains(c) || !b.columns.contains(c) {
                    bail!("schema mismatch: column {c:?} is not in both files");
                }
            }
            cols.clone()
        }
        None => a.columns.iter().filter(|c| *c != "t" && !is_band(c) && b.columns.contains(c)).cloned().collect(),
    };
    if names.is_empty() {
        bail!("schema mismatch: no common data columns");
    }
    let columns = names
        .into_iter()
        .map(|name| {
            let (x, y) = (a.column(&name).unwrap(), b.column(&name).unwrap());
            let band = |t: &Table| t.column(&format!("sigma_{name}"));
            let sigma: Option<Vec<f64>> = match (band(a), band(b)) {
                (Some(s), Some(r)) => Some(s.iter().zip(&r).map(|(p, q)| p.hypot(*q)).collect()),
                (s, r) => s.or(r),
            };
            let dev: Vec<f64> = x
                .iter()
                .zip(&y)
                .map(|(p, q)| match (p.is_nan(), q.is_nan()) {
                    (true, true) => 0.0,
                    (false, false) => (p - q).abs(),
                    _ => f64::INFINITY,
                })
                .collect();
            let max_deviation = dev.iter().copied().fold(0.0, f64::max);
            let coverage = sigma.map(|s| {
                let inside = dev.iter().zip(&s).filter(|(d, s)| **d <= 3.0 * **s).count();
                inside as f64 / dev.len().max(1) as f64
            });
            let pass = opts.tol.is_none_or(|t| max_deviation <= t) && coverage.is_none_or(|c| c >= opts.coverage);
            ColumnReport { name, max_deviation, coverage, pass }
        })
        .collect();
    Ok(Report { columns })
}
