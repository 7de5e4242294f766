//! Append-only commit log with snapshot checkpoints.
//!
//! On disk a store is a directory holding `snapshot.json` (the canonical tree
//! document) and `log.jsonl`. The log optionally starts with a
//! `{"base_revision":N}` header naming the revision the snapshot was taken at,
//! followed by one commit record per line.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path::Path;
use crate::protocol::UpdateEntry;
use crate::tree::{DataTree, Revision, TreeError, WriteAction, WriteOp};

pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub revision: Revision,
    pub server_time_ms: u64,
    pub ops: Vec<UpdateEntry>,
}

impl CommitRecord {
    pub fn new(revision: Revision, server_time_ms: u64, batch: &[WriteOp]) -> Self {
        Self {
            revision,
            server_time_ms,
            ops: batch.iter().map(UpdateEntry::from).collect(),
        }
    }

    pub fn to_batch(&self) -> Result<Vec<WriteOp>, String> {
        self.ops
            .iter()
            .map(|e| {
                let path = Path::parse(&e.path).map_err(|err| err.to_string())?;
                Ok(WriteOp {
                    path,
                    action: match &e.value {
                        Some(v) => WriteAction::Set(v.clone()),
                        None => WriteAction::Delete,
                    },
                })
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    base_revision: Revision,
}

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("corrupt log record at line {line}: {reason}")]
    CorruptRecord { line: usize, reason: String },
    #[error("snapshot unreadable: {0}")]
    Snapshot(#[from] TreeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// What recovery found.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Recovery {
    pub base_revision: Revision,
    pub records: Vec<CommitRecord>,
    /// Byte length of the log prefix made of whole, valid lines.
    pub valid_len: usize,
    pub dropped_tail: bool,
}

/// Parses a log, tolerating a torn final record.
pub fn parse_log(text: &str) -> Result<Recovery, PersistError> {
    let mut rec = Recovery::default();
    let mut offset = 0;
    let mut lines = text.split_inclusive('\n').enumerate().peekable();
    while let Some((idx, raw)) = lines.next() {
        let is_last = lines.peek().is_none();
        let complete = raw.ends_with('\n');
        let line = raw.trim_end_matches(['\n', '\r']);
        let parsed = if line.trim().is_empty() {
            Ok(None)
        } else if idx == 0 && line.contains("\"base_revision\"") {
            serde_json::from_str::<LogHeader>(line).map(|h| {
                rec.base_revision = h.base_revision;
                None
            })
        } else {
            serde_json::from_str::<CommitRecord>(line).map(Some)
        };
        match parsed {
            Ok(_) if !complete => {
                // a record without its newline may have lost bytes
                rec.dropped_tail = true;
                break;
            }
            Ok(Some(r)) => rec.records.push(r),
            Ok(None) => {}
            Err(_) if is_last => {
                rec.dropped_tail = true;
                break;
            }
            Err(e) => {
                return Err(PersistError::CorruptRecord {
                    line: idx + 1,
                    reason: e.to_string(),
                })
            }
        }
        offset += raw.len();
    }
    rec.valid_len = offset;
    Ok(rec)
}

/// Rebuilds a tree from an optional snapshot plus log text.
pub fn recover(snapshot: Option<&str>, log: &str) -> Result<(DataTree, Recovery), PersistError> {
    let rec = parse_log(log)?;
    let mut tree = match snapshot {
        Some(text) => DataTree::restore_snapshot(text)?,
        None => DataTree::new(),
    };
    tree.set_revision(rec.base_revision);
    for (i, r) in rec.records.iter().enumerate() {
        let line = i + 1 + usize::from(rec.base_revision.0 > 0);
        // records at or below the checkpoint are already inside the snapshot
        if r.revision <= tree.revision() {
            continue;
        }
        if r.revision != tree.revision().next() {
            return Err(PersistError::CorruptRecord {
                line,
                reason: format!("expected revision {}, found {}", tree.revision().next(), r.revision),
            });
        }
        let batch = r
            .to_batch()
            .map_err(|reason| PersistError::CorruptRecord { line, reason })?;
        tree.commit(&batch, r.server_time_ms)
            .map_err(|e| PersistError::CorruptRecord {
                line,
                reason: e.to_string(),
            })?;
    }
    Ok((tree, rec))
}

/// A directory-backed log.
pub struct FileStore {
    dir: PathBuf,
    log: BufWriter<File>,
    checkpoint_every: u64,
    since_checkpoint: u64,
}

impl FileStore {
    /// Opens (creating if needed) a store and recovers its tree. A torn tail is
    /// cut off so later appends start on a clean line.
    pub fn open(dir: impl AsRef<FsPath>, checkpoint_every: u64) -> Result<(Self, DataTree), PersistError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let snapshot = read_optional(&dir.join(SNAPSHOT_FILE))?;
        let log_text = read_optional(&dir.join(LOG_FILE))?.unwrap_or_default();
        let (tree, rec) = recover(snapshot.as_deref(), &log_text)?;
        if rec.dropped_tail {
            tracing::warn!(dir = %dir.display(), "dropping torn final log record");
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(false)
            .open(dir.join(LOG_FILE))?;
        file.set_len(rec.valid_len as u64)?;
        let mut file = file;
        use std::io::Seek;
        file.seek(io::SeekFrom::End(0))?;
        let since_checkpoint = rec.records.len() as u64;
        Ok((
            Self {
                dir,
                log: BufWriter::new(file),
                checkpoint_every,
                since_checkpoint,
            },
            tree,
        ))
    }

    pub fn append(&mut self, record: &CommitRecord) -> Result<(), PersistError> {
        serde_json::to_writer(&mut self.log, record).map_err(io::Error::from)?;
        self.log.write_all(b"\n")?;
        self.log.flush()?;
        self.since_checkpoint += 1;
        Ok(())
    }

    pub fn checkpoint_due(&self) -> bool {
        self.checkpoint_every > 0 && self.since_checkpoint >= self.checkpoint_every
    }

    /// Writes a snapshot of `tree` and restarts the log after it.
    pub fn checkpoint(&mut self, tree: &DataTree) -> Result<(), PersistError> {
        self.log.flush()?;
        let snap_tmp = self.dir.join("snapshot.json.tmp");
        let log_tmp = self.dir.join("log.jsonl.tmp");
        fs::write(&snap_tmp, tree.serialize_snapshot())?;
        let header = serde_json::to_string(&LogHeader {
            base_revision: tree.revision(),
        })
        .map_err(io::Error::from)?;
        fs::write(&log_tmp, format!("{header}\n"))?;
        fs::rename(&snap_tmp, self.dir.join(SNAPSHOT_FILE))?;
        fs::rename(&log_tmp, self.dir.join(LOG_FILE))?;
        let file = OpenOptions::new().append(true).open(self.dir.join(LOG_FILE))?;
        self.log = BufWriter::new(file);
        self.since_checkpoint = 0;
        Ok(())
    }

    pub fn dir(&self) -> &FsPath {
        &self.dir
    }
}

fn read_optional(path: &FsPath) -> io::Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

/// Reads every record with revision above `since` from a store directory.
pub fn read_records(dir: impl AsRef<FsPath>, since: Revision) -> Result<Vec<CommitRecord>, PersistError> {
    let text = read_optional(&dir.as_ref().join(LOG_FILE))?.unwrap_or_default();
    Ok(parse_log(&text)?
        .records
        .into_iter()
        .filter(|r| r.revision > since)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::Value;

    fn rec(rev: u64, path: &str, v: f64) -> CommitRecord {
        CommitRecord::new(
            Revision(rev),
            rev * 10,
            &[WriteOp::set(Path::parse(path).unwrap(), v)],
        )
    }

    fn log_text(records: &[CommitRecord]) -> String {
        records
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect()
    }

    #[test]
    fn empty_log_is_empty_tree() {
        let (tree, rec) = recover(None, "").unwrap();
        assert!(tree.is_empty());
        assert_eq!(rec.records.len(), 0);
    }

    #[test]
    fn torn_tail_is_dropped() {
        let records = vec![rec(1, "/a", 1.0), rec(2, "/b", 2.0), rec(3, "/c", 3.0)];
        let full = log_text(&records);
        let cut = &full[..full.len() - 7];
        let (tree, r) = recover(None, cut).unwrap();
        assert!(r.dropped_tail);
        assert_eq!(tree.revision(), Revision(2));
        assert!(tree.get(&Path::parse("/c").unwrap()).is_none());
        // a complete final line without its newline is also treated as torn
        let (tree, r) = recover(None, full.trim_end()).unwrap();
        assert!(r.dropped_tail);
        assert_eq!(tree.revision(), Revision(2));
    }

    #[test]
    fn corrupt_middle_record_is_an_error() {
        let mut text = log_text(&[rec(1, "/a", 1.0)]);
        text.push_str("garbage\n");
        text.push_str(&log_text(&[rec(2, "/b", 2.0)]));
        assert!(matches!(
            recover(None, &text),
            Err(PersistError::CorruptRecord { line: 2, .. })
        ));
    }

    #[test]
    fn revision_gap_is_an_error() {
        let text = log_text(&[rec(1, "/a", 1.0), rec(3, "/b", 2.0)]);
        assert!(matches!(
            recover(None, &text),
            Err(PersistError::CorruptRecord { .. })
        ));
    }

    #[test]
    fn file_store_checkpoint_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let (mut store, mut tree) = FileStore::open(dir.path(), 2).unwrap();
        for i in 1..=5u64 {
            let batch = [WriteOp::set(Path::parse(&format!("/k{i}")).unwrap(), i as f64)];
            let out = tree.commit(&batch, i).unwrap();
            store
                .append(&CommitRecord::new(out.revision, i, &batch))
                .unwrap();
            if store.checkpoint_due() {
                store.checkpoint(&tree).unwrap();
            }
        }
        drop(store);
        let (_store, back) = FileStore::open(dir.path(), 2).unwrap();
        assert_eq!(back, tree);
        assert_eq!(back.revision(), Revision(5));
        assert_eq!(back.get(&Path::parse("/k5").unwrap()), Some(&Value::Number(5.0)));
        assert_eq!(read_records(dir.path(), Revision(4)).unwrap().len(), 1);
    }

    #[test]
    fn reopen_after_torn_write_appends_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let text = log_text(&[rec(1, "/a", 1.0), rec(2, "/b", 2.0)]);
        fs::write(dir.path().join(LOG_FILE), &text[..text.len() - 3]).unwrap();
        let (mut store, tree) = FileStore::open(dir.path(), 0).unwrap();
        assert_eq!(tree.revision(), Revision(1));
        store.append(&rec(2, "/z", 9.0)).unwrap();
        drop(store);
        let (_s, tree) = FileStore::open(dir.path(), 0).unwrap();
        assert_eq!(tree.revision(), Revision(2));
        assert_eq!(tree.get(&Path::parse("/z").unwrap()), Some(&Value::Number(9.0)));
    }
}
