//! Table and diagnostics writers. Floats are written with 17 significant
//! digits so every value read back is bit-identical.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes a CSV table with the given header.
pub fn write_csv<I, R, S>(path: &Path, header: &[&str], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    w.write_record(header).map_err(|e| CliError::csv(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = toml::to_string(value).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Data records with their 1-based line numbers.
pub type Records = Vec<(u64, csv::StringRecord)>;

pub fn read_csv(path: &Path) -> CliResult<(Vec<String>, Records)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| CliError::csv(path, e))?;
    let header = rdr.headers().map_err(|e| CliError::csv(path, e))?.iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| {
            let r = r.map_err(|e| CliError::csv(path, e))?;
            Ok((r.position().map_or(0, |p| p.line()), r))
        })
        .collect::<CliResult<_>>()?;
    Ok((header, rows))
}

pub fn period_dir(out: &Path, label: &str) -> PathBuf {
    out.join(format!("fit_{label}"))
}
