//! Atomic file output and number formatting.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hdae_core::targets::TargetSet;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn num(v: f64) -> String {
    if v.is_finite() { format!("{v:.16e}") } else { v.to_string() }
}

/// Writes through a temporary file in the same directory and renames it over
/// `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| std::io::Error::other(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// CSV with a header row; every field is preformatted.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(std::io::Error::other)?;
    for r in rows {
        w.write_record(r).map_err(std::io::Error::other)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// `dir/stem.<suffix>` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Reads targets from a CSV with a `t` column and `y*` output columns.
/// Repeated times keep the last row, matching right-continuous evaluation at
/// event instants.
pub fn read_targets(path: &Path, n_y: usize) -> Result<TargetSet, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let header = r.headers().map_err(|e| e.to_string())?.clone();
    let t_col = header.iter().position(|h| h == "t").ok_or("data has no `t` column")?;
    let y_cols: Vec<usize> = (0..n_y)
        .map(|i| header.iter().position(|h| h == format!("y{i}")).ok_or(format!("data has no `y{i}` column")))
        .collect::<Result<_, _>>()?;
    let mut times: Vec<f64> = Vec::new();
    let mut data: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let parse = |c: usize| -> Result<f64, String> {
            rec.get(c).unwrap_or("").trim().parse::<f64>().map_err(|e| format!("row {}: {e}", line + 2))
        };
        let t = parse(t_col)?;
        let y = y_cols.iter().map(|&c| parse(c)).collect::<Result<Vec<_>, _>>()?;
        if times.last() == Some(&t) {
            *data.last_mut().unwrap() = y;
        } else {
            times.push(t);
            data.push(y);
        }
    }
    if times.is_empty() {
        return Err(format!("{} holds no data rows", path.display()));
    }
    TargetSet::new(times, Some(data)).map_err(|e| e.to_string())
}
