//! Clients for the Altar service: a blocking API client, the folder sender and
//! the query/export extractor.

pub mod api;
pub mod extractor;
pub mod sender;

pub use api::{ApiClient, ClientError};
