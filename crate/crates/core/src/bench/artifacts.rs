//! Output files of one experiment run. Every file is registered before it
//! is written and removed again unless the run finishes and calls
//! [`Artifacts::keep`], so a failed run leaves no partial outputs behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<PathBuf>,
    kept: bool,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new(), kept: false })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Registers `name` for cleanup and returns its path.
    pub fn claim(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        if !self.files.contains(&p) {
            self.files.push(p.clone());
        }
        p
    }

    /// Registers a file that lives outside the artifact directory.
    pub fn claim_external(&mut self, path: &Path) {
        if !self.files.iter().any(|f| f == path) {
            self.files.push(path.to_path_buf());
        }
    }

    pub fn text(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.claim(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn table(&mut self, name: &str, table: &Table) -> Result<PathBuf> {
        let p = self.claim(name);
        table.write(&p)?;
        Ok(p)
    }

    /// Keeps every registered file and returns their paths.
    pub fn keep(mut self) -> Vec<PathBuf> {
        self.kept = true;
        std::mem::take(&mut self.files)
    }
}

impl Drop for Artifacts {
    fn drop(&mut self) {
        if !self.kept {
            for f in &self.files {
                let _ = fs::remove_file(f);
            }
        }
    }
}

/// A delimited table with a fixed header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub delimiter: u8,
}

impl Table {
    pub fn csv(header: &str) -> Self {
        Self::with_delimiter(header, b',')
    }

    pub fn tsv(header: &str) -> Self {
        Self::with_delimiter(header, b'\t')
    }

    fn with_delimiter(header: &str, delimiter: u8) -> Self {
        Self {
            header: header.split(',').map(str::to_string).collect(),
            rows: Vec::new(),
            delimiter,
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        let mut w = csv::WriterBuilder::new()
            .delimiter(self.delimiter)
            .from_path(path)
            .map_err(io)?;
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a table and checks that its header matches `expected`.
    pub fn read(path: &Path, delimiter: u8, expected: &str) -> Result<Self> {
        let data = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let mut r = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .from_path(path)
            .map_err(data)?;
        let header: Vec<String> = r.headers().map_err(data)?.iter().map(str::to_string).collect();
        let want: Vec<String> = expected.split(',').map(str::to_string).collect();
        if header != want {
            return Err(Error::Data(format!(
                "{}: header {header:?} does not match {want:?}",
                path.display()
            )));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec.map_err(data)?.iter().map(str::to_string).collect());
        }
        Ok(Self { header, rows, delimiter })
    }
}

/// Run metadata: everything that legitimately varies between identical
/// runs (timestamps, wall-clock figures) lives here and never in a CSV body.
#[derive(Debug, Clone, Default)]
pub struct Meta {
    lines: Vec<String>,
}

impl Meta {
    pub fn new(experiment: &str) -> Self {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut m = Self::default();
        m.set("experiment", experiment);
        m.set("started_unix", now);
        m.set("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("{key} = {value}"));
    }

    pub fn render(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }
}
