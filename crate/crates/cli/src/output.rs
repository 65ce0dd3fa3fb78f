//! Files the CLI reads and writes. Floats are printed with Rust's shortest
//! round-trip formatting so identical runs give byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use secfuse::design::{DesignResult, HistoryKind, Provenance};
use secfuse::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartyGain {
    pub party: usize,
    #[serde(rename = "K")]
    pub k: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainFile {
    pub method: String,
    pub accepted: bool,
    pub spectral_radius: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub average_norm: Option<f64>,
    pub gains: Vec<PartyGain>,
}

impl GainFile {
    pub fn from_result(method: &str, party_ids: &[usize], result: &DesignResult) -> Self {
        let gains = party_ids
            .iter()
            .zip(&result.gains)
            .map(|(&party, k)| PartyGain { party, k: k.row_iter().map(|r| r.iter().copied().collect()).collect() })
            .collect();
        let average_norm = match &result.provenance {
            Provenance::NormRelaxation { average_norm, .. } => Some(*average_norm),
            _ => None,
        };
        Self {
            method: method.to_string(),
            accepted: result.accepted,
            spectral_radius: result.spectral_radius,
            iterations: result.iterations,
            converged: result.converged,
            average_norm,
            gains,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    /// Gains in the order of `party_ids`.
    pub fn matrices_for(&self, party_ids: &[usize]) -> Result<Vec<Matrix>> {
        party_ids
            .iter()
            .map(|id| {
                let entry = self
                    .gains
                    .iter()
                    .find(|g| g.party == *id)
                    .with_context(|| format!("gain file has no entry for party {id}"))?;
                let rows = entry.k.len();
                let cols = entry.k.first().map_or(0, Vec::len);
                if rows == 0 || entry.k.iter().any(|r| r.len() != cols) {
                    bail!("gain of party {id} is not a rectangular matrix");
                }
                let flat: Vec<f64> = entry.k.iter().flatten().copied().collect();
                Ok(Matrix::from_row_slice(rows, cols, &flat))
            })
            .collect()
    }
}

pub fn history_csv(result: &DesignResult) -> String {
    let column = match result.history_kind {
        HistoryKind::SpectralRadius => "spectral_radius",
        HistoryKind::GainError => "gain_error",
        HistoryKind::None => "value",
    };
    let mut out = format!("t,{column}\n");
    for (t, v) in result.history.iter().enumerate() {
        let _ = writeln!(out, "{},{v}", t + 1);
    }
    out
}

/// `k,x_1..x_n,xbar_1..xbar_n`.
pub fn trajectory_header(n: usize) -> String {
    let mut cols = vec!["k".to_string()];
    cols.extend((1..=n).map(|i| format!("x_{i}")));
    cols.extend((1..=n).map(|i| format!("xbar_{i}")));
    cols.join(",") + "\n"
}

pub fn csv_row(k: usize, values: impl IntoIterator<Item = f64>) -> String {
    let mut line = k.to_string();
    for v in values {
        let _ = write!(line, ",{v}");
    }
    line.push('\n');
    line
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.to_path_buf())
}

/// A `metric,value` table.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<(String, f64)>,
}

impl Summary {
    pub fn push(&mut self, metric: impl Into<String>, value: f64) {
        self.rows.push((metric.into(), value));
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|(m, _)| m == metric).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (m, v) in &self.rows {
            let _ = writeln!(out, "{m},{v}");
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|(m, _)| m.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  value\n", "metric");
        for (m, v) in &self.rows {
            let _ = writeln!(out, "{m:<width$}  {v}");
        }
        out
    }
}

/// Expected values with declared tolerance bands.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Golden {
    pub row: Vec<GoldenRow>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenRow {
    pub metric: String,
    pub expected: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Golden {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// One line per row; returns whether every row is inside its band.
    pub fn check(&self, summary: &Summary) -> (bool, String) {
        let mut ok = true;
        let mut report = String::new();
        for r in &self.row {
            match summary.get(&r.metric) {
                Some(v) if v >= r.lower && v < r.upper => {
                    let _ = writeln!(report, "PASS {} = {v} in [{}, {}) (expected {})", r.metric, r.lower, r.upper, r.expected);
                }
                Some(v) => {
                    ok = false;
                    let _ = writeln!(report, "FAIL {} = {v} outside [{}, {}) (expected {})", r.metric, r.lower, r.upper, r.expected);
                }
                None => {
                    ok = false;
                    let _ = writeln!(report, "FAIL {} missing from the inputs", r.metric);
                }
            }
        }
        (ok, report)
    }
}
