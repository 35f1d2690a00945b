//! Manifests and CSV time series.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// A numeric table with a header row; reals are written with 17 significant
/// digits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub manifest_hash: String,
    pub version: String,
}

impl Table {
    pub fn new(columns: Vec<String>) -> Self {
        Self { columns, ..Self::default() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn render(&self, manifest_hash: &str) -> String {
        let mut s = format!("# manifest-hash {manifest_hash}\n# version {VERSION}\n{}\n", self.columns.join(","));
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path, manifest_hash: &str) -> Result<()> {
        fs::write(path, self.render(manifest_hash)).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut t = Table::default();
        let mut header = None;
        for (no, line) in text.lines().enumerate() {
            if let Some(meta) = line.strip_prefix('#') {
                let meta = meta.trim();
                if let Some(h) = meta.strip_prefix("manifest-hash ") {
                    t.manifest_hash = h.trim().to_string();
                } else if let Some(v) = meta.strip_prefix("version ") {
                    t.version = v.trim().to_string();
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            match header {
                None => {
                    let cols: Vec<String> = line.split(',').map(|c| c.trim().to_string()).collect();
                    header = Some(cols.len());
                    t.columns = cols;
                }
                Some(n) => {
                    let row = line
                        .split(',')
                        .map(|c| c.trim().parse::<f64>().map_err(|e| anyhow!("line {}: {e}", no + 1)))
                        .collect::<Result<Vec<_>>>()?;
                    if row.len() != n {
                        bail!("line {}: {} cells, header has {n}", no + 1, row.len());
                    }
                    t.rows.push(row);
                }
            }
        }
        if t.columns.is_empty() {
            bail!("no header row");
        }
        Ok(t)
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub resolved: String,
    pub seeds: Vec<(String, u64)>,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
    pub validation_failures: usize,
}

impl Manifest {
    pub fn new(resolved: String) -> Self {
        Self { resolved, seeds: Vec::new(), outputs: Vec::new(), notes: Vec::new(), validation_failures: 0 }
    }

    /// Hash of the inputs that determine the outputs: resolved config,
    /// library version and seeds.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(VERSION.as_bytes());
        h.update(self.resolved.as_bytes());
        for (k, v) in &self.seeds {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn render(&self) -> String {
        let mut s = format!("# replica-cutoff run manifest\nversion = {VERSION}\nmanifest_hash = {}\n", self.hash());
        s.push_str(&self.resolved);
        for (k, v) in &self.seeds {
            let _ = writeln!(s, "seed.{k} = {v}");
        }
        let _ = writeln!(s, "outputs = {}", self.outputs.join(","));
        let _ = writeln!(s, "validation_failures = {}", self.validation_failures);
        let _ = writeln!(s, "status = {}", if self.validation_failures == 0 { "ok" } else { "validation-failed" });
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.txt");
        fs::write(&path, self.render()).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip_is_exact() {
        let mut t = Table::new(vec!["t".into(), "x".into()]);
        t.push(vec![0.0, 1.0 / 3.0]);
        t.push(vec![0.1, f64::NAN]);
        t.push(vec![0.2, -2.5e-300]);
        let text = t.render("abc");
        let back = Table::parse(&text).unwrap();
        assert_eq!(back.manifest_hash, "abc");
        assert_eq!(back.version, VERSION);
        assert_eq!(back.rows[0], t.rows[0]);
        assert!(back.rows[1][1].is_nan());
        assert_eq!(back.rows[2][1], -2.5e-300);
        assert!(Table::parse("# only comments\n").is_err());
        assert!(Table::parse("a,b\n1,2,3\n").is_err());
    }

    #[test]
    fn hash_depends_on_inputs() {
        let a = Manifest::new("x = 1\n".into());
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seeds.push(("run".into(), 3));
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.outputs.push("f.csv".into());
        assert!(b.render().contains("status = ok"));
    }
}
