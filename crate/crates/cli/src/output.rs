//! Manifests, line-delimited JSON files and terminal tables.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::failure::{io_internal, CliResult, Failure};

/// Manifest key excluded from reproducibility comparisons.
pub const TIMESTAMP_KEY: &str = "timestamp";

fn now_rfc3339() -> String {
    chrono::DateTime::<chrono::Utc>::from(std::time::SystemTime::now())
        .to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub struct ManifestParts<'a> {
    pub command: &'a str,
    pub backend: Value,
    pub determinism: Value,
    pub pair: Value,
    pub config: Value,
}

pub fn manifest(parts: ManifestParts<'_>) -> Value {
    json!({
        "tool": "tokattr",
        "engine_version": tokattr_core::ENGINE_VERSION,
        "protocol": tokattr_gateway::PROTOCOL,
        "command": parts.command,
        "backend": parts.backend,
        "determinism": parts.determinism,
        "pair": parts.pair,
        "config": parts.config,
        "units": "nats",
        TIMESTAMP_KEY: now_rfc3339(),
    })
}

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        io_internal(fs::create_dir_all(root), &format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn writer(&self, name: &str) -> CliResult<BufWriter<File>> {
        let p = self.path(name);
        Ok(BufWriter::new(io_internal(File::create(&p), &format!("creating {}", p.display()))?))
    }

    pub fn write_manifest(&self, manifest: &Value) -> CliResult<()> {
        self.write_json("manifest.json", manifest)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut w = self.writer(name)?;
        let text = serde_json::to_string_pretty(value).map_err(Failure::internal)?;
        io_internal(writeln!(w, "{text}").and_then(|_| w.flush()), name)
    }

    /// Header line `{"manifest": ...}` followed by one JSON value per row.
    pub fn write_jsonl<T: Serialize>(&self, name: &str, manifest: &Value, rows: &[T]) -> CliResult<()> {
        let mut w = self.writer(name)?;
        let mut line = |v: String| io_internal(writeln!(w, "{v}"), name);
        line(json!({ "manifest": manifest }).to_string())?;
        for r in rows {
            line(serde_json::to_string(r).map_err(Failure::internal)?)?;
        }
        io_internal(w.flush(), name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> CliResult<()> {
        let mut w = self.writer(name)?;
        io_internal(w.write_all(text.as_bytes()).and_then(|_| w.flush()), name)
    }

    /// CSV with the compact manifest as a leading `#` comment line.
    pub fn write_csv<T: Serialize>(&self, name: &str, manifest: &Value, rows: &[T]) -> CliResult<()> {
        let mut buf = format!("# {manifest}\n").into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for r in rows {
                w.serialize(r).map_err(Failure::internal)?;
            }
            w.flush().map_err(Failure::internal)?;
        }
        let mut f = self.writer(name)?;
        io_internal(f.write_all(&buf).and_then(|_| f.flush()), name)
    }
}

/// Reads a JSONL file written by [`OutDir::write_jsonl`]: the manifest and
/// the rows.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<(Value, Vec<T>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Value = lines
        .next()
        .ok_or_else(|| Failure::usage(format!("{} is empty", path.display())))
        .and_then(|l| serde_json::from_str(l).map_err(|e| Failure::usage(format!("{}: {e}", path.display()))))?;
    let manifest = header
        .get("manifest")
        .cloned()
        .ok_or_else(|| Failure::usage(format!("{} has no manifest header", path.display())))?;
    let rows = lines
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Failure::usage(format!("{} line {}: {e}", path.display(), i + 2)))
        })
        .collect::<CliResult<Vec<T>>>()?;
    Ok((manifest, rows))
}

/// Plain fixed-width table.
pub fn table(headers: &[&str], rows: &[Vec<String>], row_style: impl Fn(usize) -> Option<&'static str>) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let fmt_row = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = fmt_row(&headers.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    out.push('\n');
    for (i, r) in rows.iter().enumerate() {
        let line = fmt_row(r);
        match row_style(i) {
            Some(code) => out.push_str(&format!("\x1b[{code}m{line}\x1b[0m")),
            None => out.push_str(&line),
        }
        out.push('\n');
    }
    out
}

pub fn num(x: f64) -> String {
    format!("{x:.4}")
}
