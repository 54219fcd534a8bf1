//! Cross-checks between run records and the blob store.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::blob::{BlobError, BlobStore, BlobUid};
use crate::model::{ArtifactKind, ArtifactRef};
use crate::store::{Collection, DocStore, JsonFilter};

/// A BLOB artifact whose object is missing from the blob store.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DanglingRef {
    pub run_id: i64,
    pub artifact_name: String,
    pub uid: String,
}

/// A one-sided link: the run references the blob but the manifest does not name
/// the run, or the manifest names a run that does not reference the blob.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnlinkedOwner {
    pub uid: BlobUid,
    pub run_id: i64,
    pub missing_side: LinkSide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkSide {
    Manifest,
    Run,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityReport {
    /// Stored objects that no run references.
    pub orphan_blobs: Vec<BlobUid>,
    /// BLOB artifacts whose object is absent.
    pub dangling_refs: Vec<DanglingRef>,
    /// Objects whose content no longer hashes to their uid.
    pub corrupt: Vec<BlobUid>,
    /// Run/manifest links present on one side only.
    #[serde(default)]
    pub unlinked_owners: Vec<UnlinkedOwner>,
}

impl IntegrityReport {
    pub fn is_clean(&self) -> bool {
        self.orphan_blobs.is_empty()
            && self.dangling_refs.is_empty()
            && self.corrupt.is_empty()
            && self.unlinked_owners.is_empty()
    }
}

fn blob_refs(doc: &Value) -> Vec<ArtifactRef> {
    doc.get("artifacts")
        .and_then(Value::as_array)
        .map(|items| {
            items
                .iter()
                .filter_map(|a| serde_json::from_value::<ArtifactRef>(a.clone()).ok())
                .filter(|a| a.kind == ArtifactKind::Blob)
                .collect()
        })
        .unwrap_or_default()
}

/// Report-only scan; a dangling reference never makes a run unreadable.
pub fn scan_integrity(blobs: &BlobStore, db: &DocStore) -> Result<IntegrityReport, BlobError> {
    let mut report = IntegrityReport::default();
    let stored: BTreeSet<BlobUid> = blobs.list()?.into_iter().collect();

    // uid -> runs referencing it
    let mut referenced: BTreeMap<String, BTreeSet<i64>> = BTreeMap::new();
    for (run_id, doc) in db.find(Collection::Runs, &JsonFilter::all()) {
        for artifact in blob_refs(&doc) {
            let uid = artifact.blob_uid.clone().unwrap_or_default();
            referenced.entry(uid.clone()).or_default().insert(run_id);
            let present = BlobUid::parse(&uid).is_ok_and(|u| stored.contains(&u));
            if !present {
                report.dangling_refs.push(DanglingRef {
                    run_id,
                    artifact_name: artifact.name,
                    uid,
                });
            }
        }
    }

    for uid in &stored {
        let runs = referenced.get(uid.as_str());
        if runs.is_none() {
            report.orphan_blobs.push(uid.clone());
        }
        match blobs.verify(uid) {
            Ok(()) => {}
            Err(BlobError::HashMismatch { .. }) => report.corrupt.push(uid.clone()),
            Err(BlobError::NotFound(_)) => continue,
            Err(e) => return Err(e),
        }
        let owners: BTreeSet<i64> = blobs
            .manifest(uid)?
            .map(|m| m.owners.iter().map(|o| o.run_id).collect())
            .unwrap_or_default();
        // an orphan's owners are already covered by orphan_blobs
        let Some(runs) = runs else { continue };
        for run_id in runs.difference(&owners) {
            report.unlinked_owners.push(UnlinkedOwner {
                uid: uid.clone(),
                run_id: *run_id,
                missing_side: LinkSide::Manifest,
            });
        }
        for run_id in owners.difference(runs) {
            report.unlinked_owners.push(UnlinkedOwner {
                uid: uid.clone(),
                run_id: *run_id,
                missing_side: LinkSide::Run,
            });
        }
    }
    report.dangling_refs.sort();
    report.unlinked_owners.sort();
    Ok(report)
}
