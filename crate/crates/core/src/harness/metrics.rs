use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KonError, Result};

/// One optimizer step. Losses are means over the step's queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub queries: usize,
    pub l_nce: f64,
    pub l_sft: f64,
    pub l_tdt: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    /// Equality on everything except the wall clock.
    pub fn same_run(&self, other: &MetricsRow) -> bool {
        MetricsRow {
            wall_ms: 0.0,
            ..self.clone()
        } == MetricsRow {
            wall_ms: 0.0,
            ..other.clone()
        }
    }
}

pub fn same_stream(a: &[MetricsRow], b: &[MetricsRow]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_run(y))
}

/// Line-delimited JSON writer; sole owner of its file.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| KonError::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        let line = serde_json::to_string(row).map_err(|e| KonError::Config(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| KonError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| KonError::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(|e| KonError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| KonError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| KonError::Ingestion {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(rows)
}
