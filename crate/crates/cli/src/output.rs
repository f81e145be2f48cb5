use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ArtifactBody {
    Csv { header: Vec<String>, rows: Vec<Vec<String>> },
    Json(String),
}

/// A named file produced by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub body: ArtifactBody,
}

impl Artifact {
    pub fn csv(name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Self {
        Self {
            name: name.to_string(),
            body: ArtifactBody::Csv {
                header: header.iter().map(|s| s.to_string()).collect(),
                rows,
            },
        }
    }

    pub fn json(name: &str, body: String) -> Self {
        Self {
            name: name.to_string(),
            body: ArtifactBody::Json(body),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        match &self.body {
            ArtifactBody::Json(s) => Ok(s.clone().into_bytes()),
            ArtifactBody::Csv { header, rows } => {
                let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
                w.write_record(header)?;
                for r in rows {
                    w.write_record(r)?;
                }
                Ok(w.into_inner().context("flushing csv buffer")?)
            }
        }
    }
}

/// Writes to a temporary file in `dir` and renames it over `dir/name`.
pub fn write_atomic(dir: &Path, artifact: &Artifact) -> Result<PathBuf> {
    let target = dir.join(&artifact.name);
    let bytes = artifact.to_bytes()?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temporary file in {}", dir.display()))?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(&target).with_context(|| format!("renaming into {}", target.display()))?;
    Ok(target)
}

/// Shortest representation that round-trips; exponent form for very large
/// or small magnitudes.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
