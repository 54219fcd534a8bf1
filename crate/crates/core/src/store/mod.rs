//! Embedded, journal-backed document store.
//!
//! Each collection lives in memory as an ordered map and is persisted as an
//! append-only journal (`<dir>/<collection>.jsonl`). Writes are serialized
//! through a single writer and synced before they are acknowledged; reads take
//! a shared lock and see a consistent snapshot for the duration of a call.
//! A `LOCK` file keeps other processes from opening the same directory.

mod filter;
pub(crate) mod journal;
mod sort;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde_json::{json, Value};
use thiserror::Error;

pub use filter::{matches, Condition, FilterError, JsonFilter, Operator};
pub use journal::{Journal, JournalOp, JournalRecord};
pub use sort::{compare_entries, Direction, SortKey};

use crate::model::{check_document, ConfigError, RunStatus, MAX_DOCUMENT_DEPTH};

/// Largest page a query may return.
pub const MAX_QUERY_LIMIT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Collection {
    Runs,
    Metrics,
    Annotations,
    Files,
    Counters,
}

impl Collection {
    pub const ALL: [Collection; 5] = [
        Collection::Runs,
        Collection::Metrics,
        Collection::Annotations,
        Collection::Files,
        Collection::Counters,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Collection::Runs => "runs",
            Collection::Metrics => "metrics",
            Collection::Annotations => "annotations",
            Collection::Files => "files",
            Collection::Counters => "counters",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.as_str())
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Id of this collection's id counter inside `counters`.
    fn counter_id(self) -> i64 {
        self as i64 + 1
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage full")]
    StorageFull,
    #[error("I/O error: {0}")]
    Io(#[source] io::Error),
    #[error("corrupt journal {file}:{line}: {reason}")]
    CorruptJournal { file: PathBuf, line: usize, reason: String },
    #[error("store at {0} is locked by another process")]
    LockHeld(PathBuf),
    #[error("{collection}/{id} not found")]
    NotFound { collection: &'static str, id: i64 },
    #[error("{collection}/{id} already exists")]
    DuplicateId { collection: &'static str, id: i64 },
    #[error("run {0} is terminal and cannot be modified")]
    ImmutableRecord(i64),
    #[error("limit {0} exceeds the maximum of {MAX_QUERY_LIMIT}")]
    LimitExceeded(usize),
    #[error("invalid document: {0}")]
    InvalidDocument(#[from] ConfigError),
    #[error("documents must be JSON objects")]
    NotAnObject,
    #[error("the counters collection is managed internally")]
    ReservedCollection,
}

impl StoreError {
    pub(crate) fn from_io(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull {
            StoreError::StorageFull
        } else {
            StoreError::Io(e)
        }
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// One page of query results.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPage {
    /// Matches before pagination.
    pub total_matched: usize,
    pub page: Vec<(i64, Value)>,
}

impl QueryPage {
    pub fn docs(&self) -> impl Iterator<Item = &Value> {
        self.page.iter().map(|(_, d)| d)
    }
}

type Records = BTreeMap<i64, Value>;

pub struct DocStore {
    dir: PathBuf,
    _lock: File,
    data: RwLock<Vec<Records>>,
    journals: Mutex<Vec<Journal>>,
}

impl std::fmt::Debug for DocStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DocStore").field("dir", &self.dir).finish_non_exhaustive()
    }
}

fn is_terminal_run(doc: &Value) -> bool {
    doc.get("status")
        .and_then(Value::as_str)
        .and_then(RunStatus::parse)
        .is_some_and(RunStatus::is_terminal)
}

fn apply(records: &mut Records, record: JournalRecord) {
    match (record.op, record.doc) {
        (JournalOp::Delete, _) => {
            records.remove(&record.id);
        }
        (_, Some(doc)) => {
            records.insert(record.id, doc);
        }
        // rejected by Journal::open
        (_, None) => {}
    }
}

impl DocStore {
    /// Opens the store in `dir`, creating it if needed, and replays every journal.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(StoreError::from_io)?;

        let lock_path = dir.join("LOCK");
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(StoreError::from_io)?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => return Err(StoreError::LockHeld(dir)),
            Err(TryLockError::Error(e)) => return Err(StoreError::from_io(e)),
        }

        let mut data = Vec::with_capacity(Collection::ALL.len());
        let mut journals = Vec::with_capacity(Collection::ALL.len());
        for collection in Collection::ALL {
            let (journal, records) = Journal::open(&dir.join(collection.file_name()))?;
            let mut map = Records::new();
            for record in records {
                apply(&mut map, record);
            }
            data.push(map);
            journals.push(journal);
        }
        journal::sync_dir(&dir).map_err(StoreError::from_io)?;

        Ok(Self { dir, _lock: lock, data: RwLock::new(data), journals: Mutex::new(journals) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn journal_path(&self, collection: Collection) -> PathBuf {
        self.dir.join(collection.file_name())
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Vec<Records>> {
        self.data.read().expect("store data lock poisoned")
    }

    fn writer(&self) -> std::sync::MutexGuard<'_, Vec<Journal>> {
        self.journals.lock().expect("store writer lock poisoned")
    }

    /// Journals one operation, then applies it in memory. Caller holds the writer lock.
    fn commit(
        &self,
        journals: &mut [Journal],
        collection: Collection,
        op: JournalOp,
        id: i64,
        doc: Option<Value>,
    ) -> Result<()> {
        let seq = journals[collection.index()].append(op, id, doc.as_ref())?;
        let mut data = self.data.write().expect("store data lock poisoned");
        apply(&mut data[collection.index()], JournalRecord { seq, op, id, doc });
        Ok(())
    }

    fn next_id_locked(&self, journals: &mut [Journal], collection: Collection) -> Result<i64> {
        if collection == Collection::Counters {
            return Err(StoreError::ReservedCollection);
        }
        let counter_id = collection.counter_id();
        let current = self.read()[Collection::Counters.index()]
            .get(&counter_id)
            .and_then(|doc| doc.get("value"))
            .and_then(Value::as_i64);
        let next = current.unwrap_or(0) + 1;
        let op = if current.is_some() { JournalOp::Update } else { JournalOp::Insert };
        let doc = json!({"name": collection.as_str(), "value": next});
        self.commit(journals, Collection::Counters, op, counter_id, Some(doc))?;
        Ok(next)
    }

    /// Returns the next id for `collection` (1, 2, 3, …), durably recorded before returning.
    pub fn allocate_id(&self, collection: Collection) -> Result<i64> {
        let mut journals = self.writer();
        self.next_id_locked(&mut journals, collection)
    }

    pub fn allocate_run_id(&self) -> Result<i64> {
        self.allocate_id(Collection::Runs)
    }

    fn check_writable(collection: Collection, doc: &Value) -> Result<()> {
        if collection == Collection::Counters {
            return Err(StoreError::ReservedCollection);
        }
        if !doc.is_object() {
            return Err(StoreError::NotAnObject);
        }
        check_document(doc, MAX_DOCUMENT_DEPTH)?;
        Ok(())
    }

    /// Inserts `doc` under a freshly allocated id.
    pub fn insert(&self, collection: Collection, doc: Value) -> Result<i64> {
        Self::check_writable(collection, &doc)?;
        let mut journals = self.writer();
        let id = self.next_id_locked(&mut journals, collection)?;
        self.commit(&mut journals, collection, JournalOp::Insert, id, Some(doc))?;
        Ok(id)
    }

    /// Inserts `doc` under an id obtained from [`DocStore::allocate_id`].
    pub fn insert_at(&self, collection: Collection, id: i64, doc: Value) -> Result<()> {
        Self::check_writable(collection, &doc)?;
        let mut journals = self.writer();
        if self.read()[collection.index()].contains_key(&id) {
            return Err(StoreError::DuplicateId { collection: collection.as_str(), id });
        }
        self.commit(&mut journals, collection, JournalOp::Insert, id, Some(doc))
    }

    pub fn get(&self, collection: Collection, id: i64) -> Result<Value> {
        self.read()[collection.index()]
            .get(&id)
            .cloned()
            .ok_or(StoreError::NotFound { collection: collection.as_str(), id })
    }

    /// Existing document for a write, refusing terminal runs. Caller holds the writer lock.
    fn check_mutable(&self, collection: Collection, id: i64) -> Result<()> {
        let data = self.read();
        let current = data[collection.index()]
            .get(&id)
            .ok_or(StoreError::NotFound { collection: collection.as_str(), id })?;
        if collection == Collection::Runs && is_terminal_run(current) {
            return Err(StoreError::ImmutableRecord(id));
        }
        Ok(())
    }

    /// Replaces a document. Runs whose stored status is terminal are refused.
    pub fn update(&self, collection: Collection, id: i64, doc: Value) -> Result<()> {
        Self::check_writable(collection, &doc)?;
        let mut journals = self.writer();
        self.check_mutable(collection, id)?;
        self.commit(&mut journals, collection, JournalOp::Update, id, Some(doc))
    }

    pub fn delete(&self, collection: Collection, id: i64) -> Result<()> {
        if collection == Collection::Counters {
            return Err(StoreError::ReservedCollection);
        }
        let mut journals = self.writer();
        self.check_mutable(collection, id)?;
        self.commit(&mut journals, collection, JournalOp::Delete, id, None)
    }

    pub fn len(&self, collection: Collection) -> usize {
        self.read()[collection.index()].len()
    }

    pub fn is_empty(&self, collection: Collection) -> bool {
        self.len(collection) == 0
    }

    /// Every matching `(id, doc)` in id order.
    pub fn find(&self, collection: Collection, filter: &JsonFilter) -> Vec<(i64, Value)> {
        self.read()[collection.index()]
            .iter()
            .filter(|(_, doc)| filter.matches(doc))
            .map(|(id, doc)| (*id, doc.clone()))
            .collect()
    }

    /// Filters, stably sorts and paginates a collection.
    pub fn query(
        &self,
        collection: Collection,
        filter: &JsonFilter,
        sort: &[SortKey],
        skip: usize,
        limit: usize,
    ) -> Result<QueryPage> {
        if limit > MAX_QUERY_LIMIT {
            return Err(StoreError::LimitExceeded(limit));
        }
        let data = self.read();
        let mut hits: Vec<(i64, &Value)> = data[collection.index()]
            .iter()
            .filter(|(_, doc)| filter.matches(doc))
            .map(|(id, doc)| (*id, doc))
            .collect();
        if !sort.is_empty() {
            hits.sort_by(|a, b| compare_entries(sort, *a, *b));
        }
        let total_matched = hits.len();
        let page = hits
            .into_iter()
            .skip(skip)
            .take(limit)
            .map(|(id, doc)| (id, doc.clone()))
            .collect();
        Ok(QueryPage { total_matched, page })
    }

    /// Rewrites every journal as one insert per live record.
    pub fn compact(&self) -> Result<()> {
        let mut journals = self.writer();
        let data = self.read();
        for collection in Collection::ALL {
            let records = &data[collection.index()];
            journals[collection.index()].rewrite(records.iter().map(|(id, doc)| (*id, doc)))?;
        }
        Ok(())
    }
}
