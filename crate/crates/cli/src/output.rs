//! CSV/JSON artifacts, the per-run schema and the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::RunError;

/// One CSV cell. Floats are written with 17 significant digits.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Float(v) => format!("{v:.16e}"),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
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

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_owned())
    }
}

#[macro_export]
macro_rules! row {
    ($($x:expr),* $(,)?) => { vec![$($crate::output::Cell::from($x)),*] };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Float,
    Integer,
    String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Column {
    pub name: &'static str,
    pub kind: Kind,
    pub description: &'static str,
}

pub const fn float(name: &'static str, description: &'static str) -> Column {
    Column { name, kind: Kind::Float, description }
}

pub const fn int(name: &'static str, description: &'static str) -> Column {
    Column { name, kind: Kind::Integer, description }
}

pub const fn text(name: &'static str, description: &'static str) -> Column {
    Column { name, kind: Kind::String, description }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// A named physics check with its measured value and threshold.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: String,
}

impl Check {
    pub fn at_most(name: &str, value: f64, bound: f64) -> Self {
        Self { name: name.into(), pass: value <= bound, value, threshold: format!("<= {bound:e}") }
    }

    pub fn above(name: &str, value: f64, bound: f64) -> Self {
        Self { name: name.into(), pass: value > bound, value, threshold: format!("> {bound:e}") }
    }

    pub fn flag(name: &str, pass: bool) -> Self {
        Self { name: name.into(), pass, value: if pass { 1.0 } else { 0.0 }, threshold: "true".into() }
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub artifact: &'static str,
    pub version: &'static str,
    pub subcommand: &'a str,
    pub config: &'a C,
    pub started: String,
    pub finished: String,
    pub wall_clock_seconds: f64,
    pub checks: &'a [Check],
    pub metrics: &'a BTreeMap<String, f64>,
    pub files: &'a [FileEntry],
}

/// Collects the files of one run under `dir`.
pub struct OutputDir {
    dir: PathBuf,
    files: Vec<FileEntry>,
    schema: BTreeMap<String, Vec<Column>>,
}

fn io_error(path: &Path, e: std::io::Error) -> RunError {
    RunError::Io(format!("{}: {e}", path.display()))
}

/// Writes through a temporary sibling and renames into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| io_error(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| io_error(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, RunError> {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new(), schema: BTreeMap::new() })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    fn record(&mut self, name: &str, bytes: &[u8]) {
        self.files.push(FileEntry {
            path: name.to_owned(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        });
    }

    pub fn write_csv(&mut self, name: &str, columns: Vec<Column>, rows: Vec<Vec<Cell>>) -> Result<(), RunError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_error = |e: csv::Error| RunError::Io(format!("{name}: {e}"));
        w.write_record(columns.iter().map(|c| c.name)).map_err(csv_error)?;
        for (i, r) in rows.iter().enumerate() {
            if r.len() != columns.len() {
                return Err(RunError::Io(format!("{name}: row {i} has {} cells for {} columns", r.len(), columns.len())));
            }
            w.write_record(r.iter().map(Cell::render)).map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| RunError::Io(format!("{name}: {e}")))?;
        write_atomic(&self.dir.join(name), &bytes)?;
        self.record(name, &bytes);
        self.schema.insert(name.to_owned(), columns);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), RunError> {
        let bytes = serde_json::to_vec_pretty(value).map_err(|e| RunError::Io(format!("{name}: {e}")))?;
        write_atomic(&self.dir.join(name), &bytes)?;
        self.record(name, &bytes);
        Ok(())
    }

    /// Writes `schema.json`, then `manifest.json` listing every file.
    pub fn finish<C: Serialize>(
        mut self,
        subcommand: &str,
        config: &C,
        started: chrono::DateTime<chrono::Utc>,
        checks: &[Check],
        metrics: &BTreeMap<String, f64>,
    ) -> Result<(), RunError> {
        let schema = std::mem::take(&mut self.schema);
        self.write_json("schema.json", &schema)?;
        let finished = chrono::Utc::now();
        let manifest = Manifest {
            artifact: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            config,
            started: started.to_rfc3339(),
            finished: finished.to_rfc3339(),
            wall_clock_seconds: (finished - started).num_milliseconds() as f64 / 1000.0,
            checks,
            metrics,
            files: &self.files,
        };
        let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| RunError::Io(format!("manifest.json: {e}")))?;
        write_atomic(&self.dir.join("manifest.json"), &bytes)
    }
}
