//! Report files: line-delimited JSON records, a human-readable summary, and
//! plain CSV curves.
//!
//! Every experiment writes `report.jsonl` (one self-describing record per
//! line, ending in a summary record that embeds the resolved config and seed
//! list) and `summary.txt` (the same text the command prints). Curve-style
//! results additionally write one CSV per curve under the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::Result;

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Accuracy rendered as percent with two decimals, e.g. `97.84`.
pub fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// An output directory accepting records, summary text, and CSV curves.
pub struct ReportDir {
    root: PathBuf,
}

impl ReportDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(ReportDir { root: root.to_owned() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    /// Writes `report.jsonl`, one record per line.
    pub fn records(&self, records: &[Value]) -> Result<()> {
        let mut body = String::new();
        for r in records {
            body.push_str(&serde_json::to_string(r).expect("serializable record"));
            body.push('\n');
        }
        std::fs::write(self.root.join("report.jsonl"), body)?;
        Ok(())
    }

    /// Writes `summary.txt`.
    pub fn summary(&self, text: &str) -> Result<()> {
        std::fs::write(self.root.join("summary.txt"), text)?;
        Ok(())
    }

    /// Writes `<name>.csv` with the given header line and rows.
    pub fn csv(&self, name: &str, header: &str, rows: &[String]) -> Result<()> {
        let mut body = String::with_capacity(header.len() + rows.len() * 24);
        writeln!(body, "{header}").unwrap();
        for row in rows {
            writeln!(body, "{row}").unwrap();
        }
        std::fs::write(self.root.join(format!("{name}.csv")), body)?;
        Ok(())
    }
}
