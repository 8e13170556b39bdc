//! Append-only training logs: one JSON record per line, strictly increasing
//! step numbers. Stage 1 logs per optimizer step; stage 2 logs per epoch.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// Stage-1 optimizer step or stage-2 epoch, 1-based.
    pub step: u64,
    /// Total objective value at this step.
    pub total: f64,
    /// Named sub-terms (sorted keys, so serialization is stable).
    pub components: BTreeMap<String, f64>,
    pub lr: f64,
    /// Wall-clock time since the run started.
    pub elapsed_ms: u64,
    /// Refinement-step invocations during this record's span (stage 2).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine_steps: Option<u64>,
    /// Images processed during this record's span (stage 2).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<u64>,
}

/// Appends one record, creating the file (and directory) on first use.
pub fn append(path: &Path, record: &LossRecord) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating directory {}", dir.display()))?;
    }
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening training log {}", path.display()))?;
    let line = serde_json::to_string(record)?;
    writeln!(file, "{line}").with_context(|| format!("appending to {}", path.display()))?;
    Ok(())
}

/// Loads a log, enforcing parseability and strictly increasing steps.
pub fn load(path: &Path) -> Result<Vec<LossRecord>> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("opening training log {}", path.display()))?;
    let mut records = Vec::new();
    let mut last_step = 0u64;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading log line {}", idx + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LossRecord = serde_json::from_str(&line)
            .with_context(|| format!("parsing log line {}", idx + 1))?;
        if record.step <= last_step {
            bail!(
                "log line {}: step {} does not increase over {}",
                idx + 1,
                record.step,
                last_step
            );
        }
        last_step = record.step;
        records.push(record);
    }
    Ok(records)
}

/// Loads a log if it exists; a missing file is an empty history.
pub fn load_or_empty(path: &Path) -> Result<Vec<LossRecord>> {
    if path.exists() {
        load(path)
    } else {
        Ok(Vec::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64, total: f64) -> LossRecord {
        let mut components = BTreeMap::new();
        components.insert("l1".to_string(), total);
        LossRecord {
            step,
            total,
            components,
            lr: 1e-4,
            elapsed_ms: step * 10,
            refine_steps: None,
            images: None,
        }
    }

    #[test]
    fn append_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        for s in 1..=5 {
            append(&path, &record(s, 1.0 / s as f64)).unwrap();
        }
        let got = load(&path).unwrap();
        assert_eq!(got.len(), 5);
        assert_eq!(got[4].step, 5);
        assert_eq!(got[2], record(3, 1.0 / 3.0));
    }

    #[test]
    fn non_monotone_steps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        append(&path, &record(2, 0.5)).unwrap();
        append(&path, &record(2, 0.4)).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn missing_log_is_empty_history() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_or_empty(&dir.path().join("none.jsonl")).unwrap().is_empty());
    }

    #[test]
    fn bad_line_is_reported_by_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        append(&path, &record(1, 0.5)).unwrap();
        let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
        writeln!(f, "not json").unwrap();
        let err = load(&path).unwrap_err();
        assert!(format!("{err:#}").contains("line 2"));
    }
}
