//! CSV and manifest writing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Shortest fixed layout with 17 significant digits, falling back to
/// scientific notation for very small or very large magnitudes.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..16).contains(&exp) {
        format!("{:.*}", (16 - exp) as usize, x)
    } else {
        format!("{x:.16e}")
    }
}

/// One CSV cell.
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Empty,
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<i32> for Cell {
    fn from(v: i32) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => fmt_f64(*v),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

/// An in-memory table written in one go.
pub struct Table {
    name: String,
    columns: usize,
    body: String,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: header.len(),
            body: format!("{}\n", header.join(",")),
        }
    }

    pub fn row(&mut self, cells: Vec<Cell>) {
        debug_assert_eq!(cells.len(), self.columns);
        let line: Vec<String> = cells.iter().map(Cell::render).collect();
        let _ = writeln!(self.body, "{}", line.join(","));
    }
}

/// Run bookkeeping: the manifest is written before any work and rewritten
/// when the command finishes.
pub struct Run {
    dir: PathBuf,
    manifest: serde_json::Map<String, Value>,
    config_hash: String,
    outputs: Vec<String>,
}

impl Run {
    pub fn start<C: Serialize>(
        dir: &Path,
        command: &str,
        config: &C,
        seed: Option<u64>,
        threads: usize,
        argv: &[String],
    ) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Validation(format!("cannot create output directory {}: {e}", dir.display())))?;
        let config = serde_json::to_value(config).expect("configs serialize");
        let hashed = serde_json::json!({ "command": command, "config": config });
        let config_hash = format!("{:x}", Sha256::digest(hashed.to_string().as_bytes()));
        let mut manifest = serde_json::Map::new();
        manifest.insert("command".into(), command.into());
        manifest.insert("config".into(), config);
        manifest.insert("config_sha256".into(), config_hash.clone().into());
        manifest.insert("master_seed".into(), seed.map_or(Value::Null, Value::from));
        manifest.insert("seed_derivation".into(), dgff_core::seed::DERIVATION_RULE.into());
        manifest.insert(
            "versions".into(),
            serde_json::json!({
                "dgff-cli": env!("CARGO_PKG_VERSION"),
                "dgff-core": dgff_core::VERSION,
                "rng": "ChaCha12",
            }),
        );
        manifest.insert("argv".into(), argv.into());
        manifest.insert("threads".into(), threads.into());
        manifest.insert("started_at".into(), chrono::Utc::now().to_rfc3339().into());
        manifest.insert("finished_at".into(), Value::Null);
        manifest.insert("status".into(), "running".into());
        manifest.insert("outputs".into(), Value::Array(vec![]));
        let run = Self {
            dir: dir.to_path_buf(),
            manifest,
            config_hash,
            outputs: Vec::new(),
        };
        run.write_manifest()?;
        Ok(run)
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn write_manifest(&self) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&Value::Object(self.manifest.clone())).expect("manifest serializes");
        self.write_file(MANIFEST_FILE, &(text + "\n"))
    }

    fn write_file(&self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
    }

    pub fn write_table(&mut self, table: Table) -> Result<(), CliError> {
        let text = format!(
            "{}# manifest: {MANIFEST_FILE} sha256={}\n",
            table.body, self.config_hash
        );
        self.write_file(&table.name, &text)?;
        self.outputs.push(table.name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).expect("summaries serialize");
        self.write_file(name, &(text + "\n"))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn finish(mut self, status: &str) -> Result<(), CliError> {
        self.manifest
            .insert("finished_at".into(), chrono::Utc::now().to_rfc3339().into());
        self.manifest.insert("status".into(), status.into());
        self.manifest.insert(
            "outputs".into(),
            Value::Array(self.outputs.iter().map(|s| Value::from(s.as_str())).collect()),
        );
        self.write_manifest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [
            0.292_893_218_813_452_5,
            1.0 / 3.0,
            12345.678,
            -7.25e-9,
            6.02e23,
            1e-5,
            0.1,
        ] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert!(fmt_f64(1.0 - 0.5f64.sqrt()).starts_with("0.2928932"));
        assert_eq!(fmt_f64(0.0), "0");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
    }
}
