use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub seed: u64,
    pub phase: usize,
    pub seq_len: usize,
}

/// Where one sequence slot of one step came from: `length` tokens of the
/// source's packed stream starting at `offset` inside document `doc_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub step: u64,
    pub slot: usize,
    pub source_id: String,
    pub doc_id: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchManifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

impl BatchManifest {
    pub fn new(header: ManifestHeader) -> Self {
        Self {
            header,
            entries: Vec::new(),
        }
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_line(&mut out, &self.header);
        for e in &self.entries {
            write_line(&mut out, e);
        }
        out
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate().filter(|(_, l)| match l {
            Ok(l) => !l.trim().is_empty(),
            Err(_) => true,
        });
        let parse_err = |n: usize, e: &dyn std::fmt::Display| {
            Error::Integrity(format!("manifest line {}: {e}", n + 1))
        };
        let Some((n, first)) = lines.next() else {
            bail!(Integrity, "manifest is missing its header");
        };
        let first = first.map_err(|e| parse_err(n, &e))?;
        let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| parse_err(n, &e))?;
        let mut entries = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(|e| parse_err(n, &e))?;
            entries.push(serde_json::from_str(&line).map_err(|e| parse_err(n, &e))?);
        }
        Ok(Self { header, entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(BufReader::new(f))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the JSONL form.
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl()))
    }

    pub fn steps(&self) -> u64 {
        self.entries.last().map_or(0, |e| e.step + 1)
    }

    pub fn total_tokens(&self) -> u64 {
        self.entries.iter().map(|e| e.length as u64).sum()
    }
}

fn write_line<T: Serialize>(out: &mut Vec<u8>, value: &T) {
    // Serializing these plain structs cannot fail.
    serde_json::to_writer(&mut *out, value).expect("manifest record serializes");
    out.push(b'\n');
}

/// Append-only manifest file. The header is written on creation.
pub struct ManifestWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl ManifestWriter {
    pub fn create(path: &Path, header: &ManifestHeader) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        w.write(header)?;
        Ok(w)
    }

    /// Reopens an existing manifest for appending, dropping any entries at or
    /// after `from_step` (they are re-emitted by a resumed run).
    pub fn resume(path: &Path, from_step: u64) -> Result<Self> {
        let mut m = BatchManifest::load(path)?;
        m.entries.retain(|e| e.step < from_step);
        m.save(path)?;
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let mut line = Vec::new();
        write_line(&mut line, value);
        self.out
            .write_all(&line)
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, entries: &[ManifestEntry]) -> Result<()> {
        for e in entries {
            self.write(e)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for ManifestWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}
