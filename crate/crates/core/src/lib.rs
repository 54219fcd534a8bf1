//! Core building blocks for the Altar experiment-record platform.
//!
//! * [`model`]: run records, configuration trees, the run-status state machine.
//! * [`store`]: the journal-backed document store and its filter/sort query engine.
//! * [`blob`]: content-addressed large-file storage with owner manifests.
//! * [`integrity`]: cross-checks between run records and stored blobs.
//! * [`filter_lang`]: the textual filter grammar used by the extractor and viewer.

pub mod blob;
pub mod filter_lang;
pub mod hash;
pub mod integrity;
pub mod model;
pub mod store;
pub mod time;
pub mod value;

pub use blob::{BlobManifest, BlobOwner, BlobStore, BlobUid};
pub use model::{
    capture_host, flatten_paths, transition, validate_config, ArtifactKind, ArtifactRef,
    ConfigDocument, ConfigError, HostInfo, RawNode, RunEvent, RunRecord, RunStatus,
};
pub use store::{Collection, DocStore, JsonFilter, SortKey, StoreError};
pub use time::Timestamp;

/// Serializes `value` as canonical JSON: sorted object keys, no insignificant whitespace.
pub fn canonical_json<T: serde::Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    // `serde_json::Map` is a BTreeMap (no `preserve_order`), so going through `Value`
    // sorts keys of derived structs as well.
    let value = serde_json::to_value(value)?;
    serde_json::to_string(&value)
}
