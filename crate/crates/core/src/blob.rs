//! Content-addressed large-file storage.
//!
//! Objects are named by the SHA-256 of their bytes and live at
//! `objects/<uid[0:2]>/<uid>`, next to a `<uid>.manifest.json` sidecar that
//! records every run owning the object together with that run's configuration.
//! Incoming bytes are staged in `tmp/`, hashed while they stream, and only
//! then linked into place, so `objects/` never holds a file whose name differs
//! from its hash.

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{is_sha256_hex, sha256_reader, HashingWriter};
use crate::model::ConfigDocument;
use crate::store::journal::sync_dir;
use crate::time::Timestamp;

#[derive(Debug, Error)]
pub enum BlobError {
    #[error("storage full")]
    StorageFull,
    #[error("I/O error: {0}")]
    Io(#[source] io::Error),
    #[error("blob {0} not found")]
    NotFound(BlobUid),
    #[error("blob {uid} is corrupt: content hashes to {actual}")]
    HashMismatch { uid: BlobUid, actual: String },
    #[error("malformed blob uid {0:?}")]
    InvalidUid(String),
    #[error("malformed manifest for {uid}: {reason}")]
    BadManifest { uid: BlobUid, reason: String },
}

impl From<io::Error> for BlobError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull {
            BlobError::StorageFull
        } else {
            BlobError::Io(e)
        }
    }
}

pub type Result<T, E = BlobError> = std::result::Result<T, E>;

/// Lowercase hex SHA-256 of a blob's content.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BlobUid(String);

impl BlobUid {
    pub fn parse(s: &str) -> Result<Self> {
        if is_sha256_hex(s) {
            Ok(Self(s.to_string()))
        } else {
            Err(BlobError::InvalidUid(s.to_string()))
        }
    }

    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self(crate::hash::sha256_hex(bytes))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn fan_out(&self) -> &str {
        &self.0[..2]
    }
}

impl std::fmt::Display for BlobUid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for BlobUid {
    type Error = BlobError;

    fn try_from(s: String) -> Result<Self> {
        BlobUid::parse(&s)
    }
}

impl From<BlobUid> for String {
    fn from(uid: BlobUid) -> String {
        uid.0
    }
}

/// One run that attached this blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobOwner {
    pub run_id: i64,
    pub experiment_name: String,
    pub original_filename: String,
    pub config_snapshot: ConfigDocument,
}

/// Sidecar metadata stored beside each object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobManifest {
    pub uid: BlobUid,
    pub size_bytes: u64,
    pub created_at: Timestamp,
    pub owners: Vec<BlobOwner>,
}

impl BlobManifest {
    pub fn owned_by(&self, run_id: i64) -> bool {
        self.owners.iter().any(|o| o.run_id == run_id)
    }
}

/// Bytes streamed into the staging area, hashed and counted, not yet visible.
#[derive(Debug)]
pub struct StagedObject {
    path: PathBuf,
    uid: BlobUid,
    size: u64,
}

impl StagedObject {
    pub fn uid(&self) -> &BlobUid {
        &self.uid
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read_all(&self) -> io::Result<Vec<u8>> {
        fs::read(&self.path)
    }

    pub fn discard(mut self) -> io::Result<()> {
        let path = std::mem::take(&mut self.path);
        match fs::remove_file(path) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }
}

impl Drop for StagedObject {
    fn drop(&mut self) {
        if !self.path.as_os_str().is_empty() {
            let _ = fs::remove_file(&self.path);
        }
    }
}

/// An open staging file. Write the content, then [`StagingFile::finish`].
/// Dropping it unfinished removes the partial file.
pub struct StagingFile {
    path: PathBuf,
    writer: Option<HashingWriter<BufWriter<File>>>,
}

impl StagingFile {
    fn writer(&mut self) -> &mut HashingWriter<BufWriter<File>> {
        self.writer.as_mut().expect("staging file is open until finished")
    }

    pub fn bytes_written(&self) -> u64 {
        self.writer.as_ref().map_or(0, HashingWriter::bytes_written)
    }

    /// Flushes and syncs the staged bytes.
    pub fn finish(mut self) -> Result<StagedObject> {
        let (buffered, digest, size) =
            self.writer.take().expect("staging file is open until finished").into_parts();
        let path = std::mem::take(&mut self.path);
        let staged = StagedObject { path, uid: BlobUid(digest), size };
        let file = buffered.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        Ok(staged)
    }

    /// Drops the partial file.
    pub fn abort(self) {}
}

impl Drop for StagingFile {
    fn drop(&mut self) {
        if let Some(writer) = self.writer.take() {
            drop(writer);
            let _ = fs::remove_file(&self.path);
        }
    }
}

impl Write for StagingFile {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.writer().write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.writer().flush()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Created,
    AlreadyPresent,
}

/// Object-store contract (put/get/stat/list) behind the blob store.
///
/// Only the local filesystem implementation exists; an S3-compatible backend
/// can implement the same trait without changes to callers.
pub trait ObjectBackend: Send + Sync {
    fn begin_staging(&self) -> Result<StagingFile>;
    /// Makes a staged object visible under its uid. Content already present is kept
    /// and the staged copy is discarded.
    fn put(&self, staged: StagedObject) -> Result<PutOutcome>;
    fn get(&self, uid: &BlobUid) -> Result<Box<dyn Read + Send>>;
    /// Size of the stored object, if present.
    fn stat(&self, uid: &BlobUid) -> Result<Option<u64>>;
    fn list(&self) -> Result<Vec<BlobUid>>;
    fn read_manifest(&self, uid: &BlobUid) -> Result<Option<Vec<u8>>>;
    fn write_manifest(&self, uid: &BlobUid, bytes: &[u8]) -> Result<()>;
    /// Removes leftovers of interrupted uploads; returns how many were removed.
    fn cleanup_staging(&self) -> Result<usize>;
}

/// Objects under `<root>/objects`, staging under `<root>/tmp`.
#[derive(Debug)]
pub struct LocalFsBackend {
    root: PathBuf,
    counter: AtomicU64,
}

const MANIFEST_SUFFIX: &str = ".manifest.json";

impl LocalFsBackend {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("objects"))?;
        fs::create_dir_all(root.join("tmp"))?;
        Ok(Self { root, counter: AtomicU64::new(0) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn objects_dir(&self) -> PathBuf {
        self.root.join("objects")
    }

    pub fn staging_dir(&self) -> PathBuf {
        self.root.join("tmp")
    }

    pub fn object_path(&self, uid: &BlobUid) -> PathBuf {
        self.objects_dir().join(uid.fan_out()).join(uid.as_str())
    }

    pub fn manifest_path(&self, uid: &BlobUid) -> PathBuf {
        self.objects_dir().join(uid.fan_out()).join(format!("{uid}{MANIFEST_SUFFIX}"))
    }

    fn temp_name(&self, tag: &str) -> PathBuf {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos());
        self.staging_dir().join(format!("{tag}-{}-{nanos}-{n}", std::process::id()))
    }
}

impl ObjectBackend for LocalFsBackend {
    fn begin_staging(&self) -> Result<StagingFile> {
        let path = self.temp_name("upload");
        let file = File::create(&path)?;
        Ok(StagingFile {
            path,
            writer: Some(HashingWriter::new(BufWriter::with_capacity(1 << 16, file))),
        })
    }

    fn put(&self, staged: StagedObject) -> Result<PutOutcome> {
        let dest = self.object_path(&staged.uid);
        let parent = dest.parent().expect("object path has a parent");
        fs::create_dir_all(parent)?;
        // hard_link fails if the destination exists, so concurrent puts of the same
        // content resolve to one winner without ever exposing partial bytes.
        let outcome = match fs::hard_link(&staged.path, &dest) {
            Ok(()) => PutOutcome::Created,
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => PutOutcome::AlreadyPresent,
            Err(e) => return Err(e.into()),
        };
        if outcome == PutOutcome::Created {
            sync_dir(parent)?;
        }
        staged.discard()?;
        Ok(outcome)
    }

    fn get(&self, uid: &BlobUid) -> Result<Box<dyn Read + Send>> {
        match File::open(self.object_path(uid)) {
            Ok(f) => Ok(Box::new(io::BufReader::with_capacity(1 << 16, f))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(BlobError::NotFound(uid.clone())),
            Err(e) => Err(e.into()),
        }
    }

    fn stat(&self, uid: &BlobUid) -> Result<Option<u64>> {
        match fs::metadata(self.object_path(uid)) {
            Ok(m) => Ok(Some(m.len())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn list(&self) -> Result<Vec<BlobUid>> {
        let mut uids = Vec::new();
        for shard in fs::read_dir(self.objects_dir())? {
            let shard = shard?;
            if !shard.file_type()?.is_dir() {
                continue;
            }
            for entry in fs::read_dir(shard.path())? {
                let entry = entry?;
                let name = entry.file_name();
                let Some(name) = name.to_str() else { continue };
                if let Ok(uid) = BlobUid::parse(name) {
                    uids.push(uid);
                }
            }
        }
        uids.sort();
        Ok(uids)
    }

    fn read_manifest(&self, uid: &BlobUid) -> Result<Option<Vec<u8>>> {
        match fs::read(self.manifest_path(uid)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn write_manifest(&self, uid: &BlobUid, bytes: &[u8]) -> Result<()> {
        let dest = self.manifest_path(uid);
        let parent = dest.parent().expect("manifest path has a parent");
        fs::create_dir_all(parent)?;
        let tmp = self.temp_name("manifest");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        if let Err(e) = fs::rename(&tmp, &dest) {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        sync_dir(parent)?;
        Ok(())
    }

    fn cleanup_staging(&self) -> Result<usize> {
        let mut removed = 0;
        for entry in fs::read_dir(self.staging_dir())? {
            let entry = entry?;
            if entry.file_type()?.is_file() {
                fs::remove_file(entry.path())?;
                removed += 1;
            }
        }
        Ok(removed)
    }
}

/// Content-addressed store with owner manifests.
pub struct BlobStore {
    backend: Arc<dyn ObjectBackend>,
    // serializes manifest read-modify-write cycles
    manifest_lock: Mutex<()>,
}

impl std::fmt::Debug for BlobStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlobStore").finish_non_exhaustive()
    }
}

impl BlobStore {
    /// Opens a local-filesystem store rooted at `root`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::with_backend(Arc::new(LocalFsBackend::open(root)?)))
    }

    pub fn with_backend(backend: Arc<dyn ObjectBackend>) -> Self {
        Self { backend, manifest_lock: Mutex::new(()) }
    }

    pub fn backend(&self) -> &dyn ObjectBackend {
        self.backend.as_ref()
    }

    pub fn begin_staging(&self) -> Result<StagingFile> {
        self.backend.begin_staging()
    }

    /// Streams `reader` into staging.
    pub fn stage(&self, reader: &mut dyn Read) -> Result<StagedObject> {
        let mut staging = self.begin_staging()?;
        match io::copy(reader, &mut staging) {
            Ok(_) => staging.finish(),
            Err(e) => {
                staging.abort();
                Err(e.into())
            }
        }
    }

    /// Publishes a staged object and records `owner` in its manifest.
    pub fn commit(&self, staged: StagedObject, owner: BlobOwner) -> Result<BlobUid> {
        let uid = staged.uid.clone();
        let size = staged.size;
        self.backend.put(staged)?;

        let _guard = self.manifest_lock.lock().expect("manifest lock poisoned");
        let mut manifest = match self.manifest(&uid)? {
            Some(m) => m,
            None => BlobManifest { uid: uid.clone(), size_bytes: size, created_at: Timestamp::now(), owners: vec![] },
        };
        let already = manifest.owners.iter().any(|o| {
            o.run_id == owner.run_id && o.original_filename == owner.original_filename
        });
        if !already {
            manifest.owners.push(owner);
            let bytes = crate::canonical_json(&manifest).expect("manifest serializes");
            self.backend.write_manifest(&uid, bytes.as_bytes())?;
        }
        Ok(uid)
    }

    /// Stages and commits in one step.
    pub fn put(
        &self,
        reader: &mut dyn Read,
        run_id: i64,
        experiment_name: &str,
        config_snapshot: &ConfigDocument,
        original_filename: &str,
    ) -> Result<BlobUid> {
        let staged = self.stage(reader)?;
        let owner = BlobOwner {
            run_id,
            experiment_name: experiment_name.to_string(),
            original_filename: original_filename.to_string(),
            config_snapshot: config_snapshot.clone(),
        };
        self.commit(staged, owner)
    }

    pub fn manifest(&self, uid: &BlobUid) -> Result<Option<BlobManifest>> {
        let Some(bytes) = self.backend.read_manifest(uid)? else {
            return Ok(None);
        };
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| BlobError::BadManifest { uid: uid.clone(), reason: e.to_string() })
    }

    pub fn exists(&self, uid: &BlobUid) -> Result<bool> {
        Ok(self.backend.stat(uid)?.is_some())
    }

    pub fn list(&self) -> Result<Vec<BlobUid>> {
        self.backend.list()
    }

    /// Opens a blob. With `verify`, the content is re-hashed before it is returned.
    pub fn get(&self, uid: &BlobUid, verify: bool) -> Result<(Box<dyn Read + Send>, BlobManifest)> {
        if verify {
            self.verify(uid)?;
        }
        let reader = self.backend.get(uid)?;
        let manifest = match self.manifest(uid)? {
            Some(m) => m,
            None => {
                let size = self.backend.stat(uid)?.ok_or_else(|| BlobError::NotFound(uid.clone()))?;
                BlobManifest { uid: uid.clone(), size_bytes: size, created_at: Timestamp::now(), owners: vec![] }
            }
        };
        Ok((reader, manifest))
    }

    /// Re-hashes the stored bytes.
    pub fn verify(&self, uid: &BlobUid) -> Result<()> {
        let (actual, _) = sha256_reader(self.backend.get(uid)?)?;
        if actual != uid.as_str() {
            return Err(BlobError::HashMismatch { uid: uid.clone(), actual });
        }
        Ok(())
    }

    pub fn cleanup_staging(&self) -> Result<usize> {
        self.backend.cleanup_staging()
    }
}
