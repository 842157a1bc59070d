use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{Event, StudyError};

/// One append-only line-delimited log per session.
pub struct EventStore {
    dir: PathBuf,
}

fn storage(e: impl std::fmt::Display) -> StudyError {
    StudyError::Storage(e.to_string())
}

impl EventStore {
    pub fn open(dir: &Path) -> Result<Self, StudyError> {
        std::fs::create_dir_all(dir).map_err(storage)?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    fn path(&self, session: &str) -> PathBuf {
        self.dir.join(format!("{session}.jsonl"))
    }

    /// Returns only after the event is on disk.
    pub fn append(&self, session: &str, event: &Event) -> Result<(), StudyError> {
        let mut line = serde_json::to_vec(event).map_err(storage)?;
        line.push(b'\n');
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path(session))
            .map_err(storage)?;
        f.write_all(&line).map_err(storage)?;
        f.sync_data().map_err(storage)
    }

    /// Every session's events. A final line without a newline is a write
    /// that never completed (and was never acknowledged); it is cut from the
    /// file so later appends start on a fresh line.
    pub fn load_all(&self) -> Result<BTreeMap<String, Vec<Event>>, StudyError> {
        let mut out = BTreeMap::new();
        for entry in std::fs::read_dir(&self.dir).map_err(storage)? {
            let path = entry.map_err(storage)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("jsonl") {
                continue;
            }
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let text = std::fs::read_to_string(&path).map_err(storage)?;
            let keep = text.rfind('\n').map_or(0, |i| i + 1);
            if keep < text.len() {
                let f = std::fs::OpenOptions::new()
                    .write(true)
                    .open(&path)
                    .map_err(storage)?;
                f.set_len(keep as u64).map_err(storage)?;
                f.sync_data().map_err(storage)?;
            }
            let complete = &text[..keep];
            let events = complete
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    serde_json::from_str(l).map_err(|e| storage(format!("{}: {e}", path.display())))
                })
                .collect::<Result<Vec<Event>, _>>()?;
            if !events.is_empty() {
                out.insert(id, events);
            }
        }
        Ok(out)
    }
}
