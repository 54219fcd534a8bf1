//! Newline-delimited canonical-JSON journal, one file per collection.
//!
//! Every line is `{"doc":…,"id":K,"op":"insert","seq":N}`. A line is
//! acknowledged only after it and its newline are synced, so a final line
//! without a newline is a torn write and is dropped on open.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JournalOp {
    Insert,
    Update,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub seq: u64,
    pub op: JournalOp,
    pub id: i64,
    pub doc: Option<Value>,
}

impl JournalRecord {
    pub fn to_line(&self) -> String {
        let mut line = crate::canonical_json(self).expect("journal record serializes");
        line.push('\n');
        line
    }
}

pub(crate) fn sync_dir(dir: &Path) -> io::Result<()> {
    #[cfg(unix)]
    File::open(dir)?.sync_all()?;
    #[cfg(not(unix))]
    let _ = dir;
    Ok(())
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
    len: u64,
    last_seq: u64,
}

impl Journal {
    /// Opens (creating if needed) and replays the journal at `path`.
    ///
    /// A torn final line is truncated away so later appends start on a line boundary.
    pub fn open(path: &Path) -> Result<(Journal, Vec<JournalRecord>), StoreError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(StoreError::from_io)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(StoreError::from_io)?;

        let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if complete < bytes.len() {
            file.set_len(complete as u64).map_err(StoreError::from_io)?;
            file.sync_all().map_err(StoreError::from_io)?;
        }

        let mut records = Vec::new();
        let mut last_seq = 0;
        for (index, line) in bytes[..complete].split_inclusive(|&b| b == b'\n').enumerate() {
            let line = &line[..line.len() - 1];
            let corrupt = |reason: String| StoreError::CorruptJournal {
                file: path.to_path_buf(),
                line: index + 1,
                reason,
            };
            let record: JournalRecord =
                serde_json::from_slice(line).map_err(|e| corrupt(e.to_string()))?;
            if record.seq <= last_seq {
                return Err(corrupt(format!("seq {} after {}", record.seq, last_seq)));
            }
            if record.op != JournalOp::Delete && !record.doc.as_ref().is_some_and(Value::is_object)
            {
                return Err(corrupt("insert/update without a document".into()));
            }
            last_seq = record.seq;
            records.push(record);
        }

        let journal = Journal { path: path.to_path_buf(), file, len: complete as u64, last_seq };
        Ok((journal, records))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record and syncs it. On failure the file is restored to its previous length.
    pub fn append(&mut self, op: JournalOp, id: i64, doc: Option<&Value>) -> Result<u64, StoreError> {
        let record = JournalRecord { seq: self.last_seq + 1, op, id, doc: doc.cloned() };
        let line = record.to_line();
        let written = self.file.write_all(line.as_bytes()).and_then(|()| self.file.sync_data());
        if let Err(e) = written {
            let _ = self.file.set_len(self.len);
            return Err(StoreError::from_io(e));
        }
        self.len += line.len() as u64;
        self.last_seq = record.seq;
        Ok(record.seq)
    }

    /// Atomically replaces the journal with one insert per live document.
    pub fn rewrite<'a>(
        &mut self,
        live: impl Iterator<Item = (i64, &'a Value)>,
    ) -> Result<(), StoreError> {
        let tmp_path = self.path.with_extension("jsonl.compact");
        let mut len = 0u64;
        let mut seq = 0u64;
        {
            let mut tmp = io::BufWriter::new(File::create(&tmp_path).map_err(StoreError::from_io)?);
            for (id, doc) in live {
                seq += 1;
                let record =
                    JournalRecord { seq, op: JournalOp::Insert, id, doc: Some(doc.clone()) };
                let line = record.to_line();
                tmp.write_all(line.as_bytes()).map_err(StoreError::from_io)?;
                len += line.len() as u64;
            }
            let tmp = tmp.into_inner().map_err(|e| StoreError::from_io(e.into_error()))?;
            tmp.sync_all().map_err(StoreError::from_io)?;
        }
        fs::rename(&tmp_path, &self.path).map_err(StoreError::from_io)?;
        if let Some(dir) = self.path.parent() {
            sync_dir(dir).map_err(StoreError::from_io)?;
        }
        self.file = OpenOptions::new().append(true).open(&self.path).map_err(StoreError::from_io)?;
        self.len = len;
        self.last_seq = seq;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn line_format_is_canonical() {
        let record = JournalRecord {
            seq: 3,
            op: JournalOp::Insert,
            id: 7,
            doc: Some(json!({"b": 1, "a": "x"})),
        };
        assert_eq!(record.to_line(), "{\"doc\":{\"a\":\"x\",\"b\":1},\"id\":7,\"op\":\"insert\",\"seq\":3}\n");
    }

    #[test]
    fn torn_tail_is_dropped_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.jsonl");
        let mut bytes = String::new();
        for i in 1..=3 {
            bytes += &JournalRecord {
                seq: i,
                op: JournalOp::Insert,
                id: i as i64,
                doc: Some(json!({"n": i})),
            }
            .to_line();
        }
        let full = bytes.len();
        bytes += "{\"doc\":{\"n\":4},\"id\":4,\"op\":\"ins";
        fs::write(&path, &bytes).unwrap();

        let (mut journal, records) = Journal::open(&path).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(fs::metadata(&path).unwrap().len(), full as u64);
        journal.append(JournalOp::Update, 1, Some(&json!({"n": 10}))).unwrap();
        drop(journal);
        let (_, records) = Journal::open(&path).unwrap();
        assert_eq!(records.len(), 4);
        assert_eq!(records[3].seq, 4);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.jsonl");
        let good = JournalRecord { seq: 2, op: JournalOp::Insert, id: 2, doc: Some(json!({})) };
        fs::write(&path, format!("garbage\n{}", good.to_line())).unwrap();
        match Journal::open(&path) {
            Err(StoreError::CorruptJournal { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected CorruptJournal, got {other:?}"),
        }
    }

    #[test]
    fn non_increasing_seq_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.jsonl");
        let a = JournalRecord { seq: 2, op: JournalOp::Insert, id: 1, doc: Some(json!({})) };
        let b = JournalRecord { seq: 2, op: JournalOp::Insert, id: 2, doc: Some(json!({})) };
        fs::write(&path, format!("{}{}", a.to_line(), b.to_line())).unwrap();
        assert!(matches!(Journal::open(&path), Err(StoreError::CorruptJournal { line: 2, .. })));
    }
}
