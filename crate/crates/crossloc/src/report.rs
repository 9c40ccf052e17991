//! Report files: JSON for machines, aligned text tables for people.
//!
//! `report.json` carries the fields of [`EvalReport`]:
//! `n`, `accu_025`, `accu_05` (fractions) and `records`, each with `id`,
//! `iou`, `hit_025`, `hit_05`.

use std::path::{Path, PathBuf};

use crossloc_core::eval::{format_percent, EvalReport};

use crate::error::{Error, Result};

/// Left-aligned columns separated by two spaces.
pub fn format_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_owned() + "\n"
    };
    let mut out = line(headers.to_vec());
    for row in rows {
        out += &line(row.iter().map(String::as_str).collect());
    }
    out
}

pub const ACCU_HEADERS: [&str; 2] = ["accu@0.25(%)", "accu@0.5(%)"];

pub fn accuracy_cells(r: &EvalReport) -> Vec<String> {
    vec![format_percent(r.accu_025), format_percent(r.accu_05)]
}

pub fn report_table(r: &EvalReport) -> String {
    let mut row = vec![r.n.to_string()];
    row.extend(accuracy_cells(r));
    format_table(&["n", ACCU_HEADERS[0], ACCU_HEADERS[1]], &[row])
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    std::fs::write(path, text).map_err(Error::io(path))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

/// Writes `<stem>.json` and `<stem>.txt` into `dir`; returns both paths.
pub fn write_report(report: &EvalReport, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let json = dir.join(format!("{stem}.json"));
    let txt = dir.join(format!("{stem}.txt"));
    write_json(&json, report)?;
    write_text(&txt, &report_table(report))?;
    Ok((json, txt))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
