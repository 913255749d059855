use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const LOG_HEADER: &str = "step,loss,wall_ms";

/// One optimizer step; `wall_ms` is measured, never derived from the seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub wall_ms: f64,
}

pub fn format_log(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{:e},{:.3}", r.step, r.loss, r.wall_ms);
    }
    out
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    fs::write(path, format_log(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_log_csv(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, what: &str| Error::Integrity {
        file: path.to_path_buf(),
        detail: format!("line {line}: {what}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == LOG_HEADER => {}
        _ => return Err(bad(1, "missing step,loss,wall_ms header")),
    }
    let mut rows: Vec<LogRow> = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad(i + 1, "expected 3 fields"));
        }
        let row = LogRow {
            step: f[0].parse().map_err(|_| bad(i + 1, "bad step"))?,
            loss: f[1].parse().map_err(|_| bad(i + 1, "bad loss"))?,
            wall_ms: f[2].parse().map_err(|_| bad(i + 1, "bad wall_ms"))?,
        };
        if rows.last().is_some_and(|p| p.step >= row.step) {
            return Err(bad(i + 1, "step indices must increase"));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Training log written beside a checkpoint: `model.ctlf` → `model.log.csv`.
pub fn log_path(checkpoint: &Path) -> std::path::PathBuf {
    checkpoint.with_extension("log.csv")
}
