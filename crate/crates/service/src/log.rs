//! Append-only selection log. Every answer is written and synced before it
//! is acknowledged; reopening the log restores the answers.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::session::Choice;
use crate::ServiceError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: usize,
    pub utterance_id: String,
    pub ticket: String,
    pub choice: Choice,
    pub candidate1_left: bool,
    pub r: u8,
    #[serde(default)]
    pub annotator: Option<String>,
}

pub struct SelectionLog {
    path: PathBuf,
    file: File,
    entries: Vec<LogEntry>,
}

impl SelectionLog {
    /// Opens or creates the log at `path`, reading any existing entries.
    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        let mut entries = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry = serde_json::from_str(&line)
                    .map_err(|e| ServiceError::CorruptLog(format!("{}:{}: {e}", path.display(), n + 1)))?;
                entries.push(entry);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(SelectionLog {
            path: path.to_path_buf(),
            file,
            entries,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(entry).map_err(|e| ServiceError::CorruptLog(e.to_string()))?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        self.entries.push(entry.clone());
        Ok(())
    }
}
