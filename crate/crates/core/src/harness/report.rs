//! Communication-cost comparison across finished runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::run::RunMeta;
use crate::netsim::LedgerTotals;
use crate::protocols::Algorithm;

#[derive(Debug, Clone, Serialize)]
pub struct CostRow {
    pub dir: PathBuf,
    pub algorithm: Algorithm,
    pub trial: usize,
    pub totals: LedgerTotals,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    /// `1 - cost(ce_gatta) / cost(dsgd)` over mean totals.
    pub reduction: Option<f64>,
}

/// `1 - ce / dsgd` as a percentage string with one decimal.
pub fn format_reduction(ce: f64, dsgd: f64) -> String {
    format!("{:.1}%", 100.0 * (1.0 - ce / dsgd))
}

pub fn read_meta(dir: &Path) -> Result<RunMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Directories holding a `meta.json` at or below `dir`, sorted.
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    if dir.join("meta.json").is_file() {
        found.push(dir.to_path_buf());
        return Ok(found);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for e in entries {
        found.extend(find_runs(&e)?);
    }
    Ok(found)
}

fn mean_total(rows: &[CostRow], algorithm: Algorithm) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.algorithm == algorithm)
        .map(|r| r.totals.scalars() as f64)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn cost_report(dirs: &[PathBuf]) -> Result<CostReport> {
    let mut rows = Vec::new();
    for d in dirs {
        for run in find_runs(d)? {
            let meta = read_meta(&run)?;
            rows.push(CostRow {
                dir: run,
                algorithm: meta.algorithm,
                trial: meta.trial,
                totals: meta.ledger_totals,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid("no run directories (meta.json) found"));
    }
    let reduction = match (
        mean_total(&rows, Algorithm::CeGatta),
        mean_total(&rows, Algorithm::Dsgd),
    ) {
        (Some(ce), Some(d)) if d > 0.0 => Some(1.0 - ce / d),
        _ => None,
    };
    Ok(CostReport { rows, reduction })
}

impl CostReport {
    pub fn render_table(&self) -> String {
        let mut s = String::from(
            "| run | algorithm | trial | global scalars | head scalars | control msgs | total scalars |\n",
        );
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.dir.display(),
                r.algorithm,
                r.trial,
                r.totals.global_scalars,
                r.totals.head_scalars,
                r.totals.control_messages,
                r.totals.scalars()
            );
        }
        match (
            mean_total(&self.rows, Algorithm::CeGatta),
            mean_total(&self.rows, Algorithm::Dsgd),
        ) {
            (Some(ce), Some(d)) if d > 0.0 => {
                let _ = writeln!(s, "\nreduction (ce_gatta vs dsgd): {}", format_reduction(ce, d));
            }
            _ => s.push_str("\nreduction: n/a (needs both ce_gatta and dsgd runs)\n"),
        }
        s
    }
}
