//! File-backed persistence under the data directory.
//!
//! ```text
//! <data>/events/<model_version>/events.jsonl    accepted prediction lines
//! <data>/events/<model_version>/outcomes.jsonl  accepted outcome lines
//! <data>/labels/<model_version>.json            current label (atomic replace)
//! <data>/rollouts/<id>.log                      plan line, then transitions
//! <data>/comparisons/<id>.json                  comparison report (atomic replace)
//! <data>/review/queue.jsonl                     review-queue journal
//! ```
//!
//! Log lines are written with a single `write_all` of `line + "\n"` and then
//! flushed. On restore, an unterminated final line is the trace of an
//! interrupted write: it is dropped, reported, and truncated away so later
//! appends start on a clean line. Any other unreadable line is a hard error.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::GatewayError;

/// One write as seen by the file system, recorded when tracing is on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WriteOp {
    Append { path: PathBuf, bytes: Vec<u8> },
    /// Whole-file replacement via temp file and rename; never partial.
    Replace { path: PathBuf, bytes: Vec<u8> },
}

impl WriteOp {
    pub fn path(&self) -> &Path {
        match self {
            WriteOp::Append { path, .. } | WriteOp::Replace { path, .. } => path,
        }
    }
}

pub type WriteTrace = Arc<Mutex<Vec<WriteOp>>>;

/// Complete lines with their 1-based numbers.
pub type LogLines = Vec<(usize, String)>;

/// A dropped, partially written final line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveredTail {
    pub file: PathBuf,
    pub line: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
    trace: Option<WriteTrace>,
}

pub fn safe_component(name: &str) -> Result<&str, GatewayError> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(name)
    } else {
        Err(GatewayError::BadRequest(format!(
            "`{name}` must be non-empty and use only ASCII letters, digits, '-', '_' or '.'"
        )))
    }
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataDir {
            root: root.into(),
            trace: None,
        }
    }

    /// Records every write (relative path and bytes) into `trace`.
    pub fn with_trace(mut self, trace: WriteTrace) -> Self {
        self.trace = Some(trace);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn events_log(&self, model_version: &str) -> Result<PathBuf, GatewayError> {
        Ok(PathBuf::from("events").join(safe_component(model_version)?).join("events.jsonl"))
    }

    pub fn outcomes_log(&self, model_version: &str) -> Result<PathBuf, GatewayError> {
        Ok(PathBuf::from("events").join(safe_component(model_version)?).join("outcomes.jsonl"))
    }

    pub fn label_file(&self, model_version: &str) -> Result<PathBuf, GatewayError> {
        Ok(PathBuf::from("labels").join(format!("{}.json", safe_component(model_version)?)))
    }

    pub fn rollout_log(&self, id: &str) -> Result<PathBuf, GatewayError> {
        Ok(PathBuf::from("rollouts").join(format!("{}.log", safe_component(id)?)))
    }

    pub fn comparison_file(&self, id: &str) -> Result<PathBuf, GatewayError> {
        Ok(PathBuf::from("comparisons").join(format!("{}.json", safe_component(id)?)))
    }

    pub fn review_log(&self) -> PathBuf {
        PathBuf::from("review").join("queue.jsonl")
    }

    fn record(&self, op: WriteOp) {
        if let Some(t) = &self.trace {
            t.lock().expect("trace lock").push(op);
        }
    }

    fn ensure_parent(&self, abs: &Path) -> Result<(), GatewayError> {
        if let Some(parent) = abs.parent() {
            fs::create_dir_all(parent).map_err(|e| GatewayError::io(format!("create {}", parent.display()), e))?;
        }
        Ok(())
    }

    /// Appends one JSON value as a line.
    pub fn append_json<T: Serialize>(&self, rel: &Path, value: &T) -> Result<(), GatewayError> {
        let line = serde_json::to_string(value).map_err(|e| GatewayError::Internal(e.to_string()))?;
        self.append_line(rel, &line)
    }

    /// Appends `line` plus a newline in one write, then flushes.
    pub fn append_line(&self, rel: &Path, line: &str) -> Result<(), GatewayError> {
        debug_assert!(!line.contains('\n'));
        let abs = self.root.join(rel);
        self.ensure_parent(&abs)?;
        let mut bytes = Vec::with_capacity(line.len() + 1);
        bytes.extend_from_slice(line.as_bytes());
        bytes.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&abs)
            .map_err(|e| GatewayError::io(format!("open {}", abs.display()), e))?;
        f.write_all(&bytes)
            .and_then(|_| f.flush())
            .map_err(|e| GatewayError::io(format!("append {}", abs.display()), e))?;
        self.record(WriteOp::Append {
            path: rel.to_path_buf(),
            bytes,
        });
        Ok(())
    }

    /// Replaces a whole file atomically.
    pub fn replace_json<T: Serialize>(&self, rel: &Path, value: &T) -> Result<(), GatewayError> {
        let abs = self.root.join(rel);
        self.ensure_parent(&abs)?;
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| GatewayError::Internal(e.to_string()))?;
        bytes.push(b'\n');
        let tmp = abs.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &abs)
        };
        write().map_err(|e| GatewayError::io(format!("write {}", abs.display()), e))?;
        self.record(WriteOp::Replace {
            path: rel.to_path_buf(),
            bytes,
        });
        Ok(())
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &Path) -> Result<T, GatewayError> {
        let abs = self.root.join(rel);
        let text = fs::read_to_string(&abs).map_err(|e| GatewayError::io(format!("read {}", abs.display()), e))?;
        serde_json::from_str(&text).map_err(|e| GatewayError::CorruptLog {
            file: abs.clone(),
            line: e.line(),
            reason: e.to_string(),
        })
    }

    /// Relative paths of the files directly under `dir` with `extension`,
    /// sorted.
    pub fn list(&self, dir: &str, extension: &str) -> Result<Vec<PathBuf>, GatewayError> {
        let abs = self.root.join(dir);
        let entries = match fs::read_dir(&abs) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(GatewayError::io(format!("list {}", abs.display()), e)),
        };
        let mut out = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| GatewayError::io(format!("list {}", abs.display()), e))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) == Some(extension) {
                out.push(PathBuf::from(dir).join(entry.file_name()));
            }
        }
        out.sort();
        Ok(out)
    }

    /// Sub-directory names under `dir`, sorted.
    pub fn subdirs(&self, dir: &str) -> Result<Vec<String>, GatewayError> {
        let abs = self.root.join(dir);
        let entries = match fs::read_dir(&abs) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(GatewayError::io(format!("list {}", abs.display()), e)),
        };
        let mut out = Vec::new();
        for entry in entries.flatten() {
            if entry.path().is_dir() {
                if let Some(name) = entry.file_name().to_str() {
                    out.push(name.to_string());
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Complete lines of a log, each with its 1-based line number. A torn
    /// final line is removed from the file and returned as recovered.
    pub fn read_log(&self, rel: &Path) -> Result<(LogLines, Option<RecoveredTail>), GatewayError> {
        let abs = self.root.join(rel);
        let bytes = match fs::read(&abs) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), None)),
            Err(e) => return Err(GatewayError::io(format!("read {}", abs.display()), e)),
        };
        let complete = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        let body = &bytes[..complete];
        let count = body.iter().filter(|b| **b == b'\n').count();
        let mut lines = Vec::new();
        for (i, raw) in body.split(|b| *b == b'\n').take(count).enumerate() {
            let text = std::str::from_utf8(raw).map_err(|e| GatewayError::CorruptLog {
                file: abs.clone(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            if !text.trim().is_empty() {
                lines.push((i + 1, text.to_string()));
            }
        }
        let tail = if complete < bytes.len() {
            let line = count + 1;
            let f = OpenOptions::new()
                .write(true)
                .open(&abs)
                .map_err(|e| GatewayError::io(format!("open {}", abs.display()), e))?;
            f.set_len(complete as u64)
                .map_err(|e| GatewayError::io(format!("truncate {}", abs.display()), e))?;
            tracing::warn!(file = %abs.display(), line, "dropped partially written final line");
            Some(RecoveredTail {
                file: rel.to_path_buf(),
                line,
                bytes: bytes.len() - complete,
            })
        } else {
            None
        };
        Ok((lines, tail))
    }

    pub fn corrupt(&self, rel: &Path, line: usize, reason: impl ToString) -> GatewayError {
        GatewayError::CorruptLog {
            file: self.root.join(rel),
            line,
            reason: reason.to_string(),
        }
    }
}
