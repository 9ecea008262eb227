// SPDX-License-Identifier: MIT OR Apache-2.0

//! QA sets on disk: one JSON object per line, integer token ids.
//!
//! ```text
//! {"question":[231,236,238],"prompt":{"tokens":[...],"shots":3,"label":{"tag":"S","polarity":"negative"}},"answer":"yes"}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::qa::QAExample;
use crate::error::{Error, Result};

pub fn write_qa_set(path: &Path, set: &[QAExample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in set {
        let line = serde_json::to_string(ex).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_qa_set(path: &Path) -> Result<Vec<QAExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(ex);
    }
    Ok(out)
}
