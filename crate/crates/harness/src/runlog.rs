//! Line-delimited JSON event logs and the per-run lockfile.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{HarnessError, Result};

pub const LOCK_FILE: &str = "run.lock";

/// Appends one JSON object per line and flushes after each event.
pub struct EventLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl EventLog {
    /// Starts a fresh log at `path`, replacing an older one.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(Self { out: BufWriter::new(File::create(path)?), path: path.to_path_buf() })
    }

    pub fn event(&mut self, v: Value) -> Result<()> {
        serde_json::to_writer(&mut self.out, &v)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Reads every event of a log.
pub fn read_events(path: &Path) -> Result<Vec<Value>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(HarnessError::from))
        .collect()
}

/// Exclusive hold on a run directory; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir)?;
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = fs::read_to_string(&path).unwrap_or_default();
                Err(HarnessError::Locked(format!(
                    "{} is held by process {} (delete it if that process is gone)",
                    path.display(),
                    owner.trim()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(HarnessError::Locked(_))));
        drop(lock);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn events_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logs/x.jsonl");
        let mut log = EventLog::create(&path).unwrap();
        log.event(json!({"event": "step", "step": 1, "loss": 0.5})).unwrap();
        log.event(json!({"event": "done"})).unwrap();
        let ev = read_events(&path).unwrap();
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[0]["loss"], 0.5);
    }
}
