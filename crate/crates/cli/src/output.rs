//! CSV emission. Every table starts with a comment line tying it to the
//! exact configuration bytes and tool version that produced it, followed by
//! a header row; numbers are written in round-trip scientific notation so
//! identical runs produce identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::CliError;

/// Provenance stamp shared by all tables of one run.
#[derive(Debug, Clone)]
pub struct CsvMeta {
    pub config_sha256: String,
    pub version: &'static str,
}

impl CsvMeta {
    pub fn from_config_bytes(bytes: &[u8]) -> Self {
        Self {
            config_sha256: format!("{:x}", Sha256::digest(bytes)),
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    fn comment_line(&self) -> String {
        format!(
            "# config_sha256={} tool_version={}",
            self.config_sha256, self.version
        )
    }
}

/// Shortest representation that parses back to the same f64.
pub fn num(x: f64) -> String {
    format!("{x:e}")
}

/// Writes `name` under `dir` with the provenance comment, a header, and one
/// line per row. Rows are joined with commas and the file ends in a newline.
pub fn write_csv(
    dir: &Path,
    name: &str,
    meta: &CsvMeta,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let file = File::create(&path)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", meta.comment_line())?;
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(path)
}
