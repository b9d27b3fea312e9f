//! JSONL serialization for samples and predictions. One JSON object per
//! line, UTF-8; CRLF input is accepted.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Sample;

/// One generated prediction, joined to its reference by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredRecord {
    pub id: u64,
    pub prediction: String,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match serde_json::from_str(trimmed) {
            Ok(v) => out.push(v),
            Err(e) => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    read_lines(path)
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    write_lines(path, samples)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredRecord>> {
    read_lines(path)
}

pub fn write_predictions(path: &Path, preds: &[PredRecord]) -> Result<()> {
    write_lines(path, preds)
}
