//! CSV tables with a provenance comment line.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Renders `rows` as CSV preceded by `# seed=<seed> config=<hash>`.
pub fn to_csv<R: Serialize>(rows: &[R], seed: u64, config_hash: &str) -> anyhow::Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = String::from_utf8(w.into_inner()?)?;
    Ok(format!("# seed={seed} config={config_hash}\n{body}"))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R], seed: u64, config_hash: &str) -> anyhow::Result<()> {
    std::fs::write(path, to_csv(rows, seed, config_hash)?)?;
    Ok(())
}

/// Parses a table written by [`to_csv`], skipping `#` comment lines.
pub fn from_csv<R: DeserializeOwned>(text: &str) -> anyhow::Result<Vec<R>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Everything after the comment lines.
pub fn body(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

/// [`body`] with the named columns removed; for comparing runs whose only
/// expected difference is timing.
pub fn body_without(text: &str, drop: &[&str]) -> anyhow::Result<String> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    let keep: Vec<usize> = (0..headers.len()).filter(|&i| !drop.contains(&&headers[i])).collect();
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(keep.iter().map(|&i| &headers[i]))?;
    for rec in r.records() {
        let rec = rec?;
        w.write_record(keep.iter().map(|&i| &rec[i]))?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}
