use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use dvpo_core::{LabError, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// One line of the metrics log. `seq` is a logical clock: the line's index
/// within the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogLine {
    pub schema_version: u32,
    pub seq: u64,
    pub stage: String,
    pub kind: String,
    pub record: Value,
}

/// Append-only line-delimited JSON writer.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
    next: u64,
}

impl MetricsLog {
    /// Opens for appending, continuing the sequence of an existing log.
    pub fn append(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let next = if path.exists() {
            read_log(path)?.len() as u64
        } else {
            0
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            next,
        })
    }

    /// Starts an empty log, replacing any previous one.
    pub fn create(path: &Path) -> Result<Self> {
        if path.exists() {
            fs::remove_file(path)?;
        }
        Self::append(path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, stage: &str, kind: &str, record: &impl Serialize) -> Result<()> {
        let line = LogLine {
            schema_version: METRICS_SCHEMA_VERSION,
            seq: self.next,
            stage: stage.to_string(),
            kind: kind.to_string(),
            record: serde_json::to_value(record)?,
        };
        let mut text = serde_json::to_string(&line)?;
        text.push('\n');
        self.file.write_all(text.as_bytes())?;
        self.file.flush()?;
        self.next += 1;
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    if !path.exists() {
        return Err(LabError::MissingArtifact(path.display().to_string()));
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: LogLine = serde_json::from_str(&line)
            .map_err(|e| LabError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if l.schema_version != METRICS_SCHEMA_VERSION {
            return Err(LabError::Data(format!(
                "{} line {}: schema version {} is not {METRICS_SCHEMA_VERSION}",
                path.display(),
                i + 1,
                l.schema_version
            )));
        }
        out.push(l);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_parse_independently_and_sequence_continues() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut log = MetricsLog::create(&p).unwrap();
        log.write("a", "x", &serde_json::json!({"v": 1})).unwrap();
        log.write("a", "x", &serde_json::json!({"v": 2})).unwrap();
        drop(log);
        let mut log = MetricsLog::append(&p).unwrap();
        log.write("b", "y", &3).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        for line in text.lines() {
            let v: Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["schema_version"], 1);
        }
        let lines = read_log(&p).unwrap();
        assert_eq!(
            lines.iter().map(|l| l.seq).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        MetricsLog::create(&p).unwrap();
        assert!(read_log(&p).unwrap().is_empty());
    }
}
