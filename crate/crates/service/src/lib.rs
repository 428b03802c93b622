//! Interactive search sessions over HTTP.
//!
//! A [`Service`] owns the object catalog (labels and image references), the
//! current embedding version and the triplet store. Users answer "which of
//! these looks most like what you want?" queries; once they confirm the
//! target, every pairwise outcome of their session becomes a triplet and the
//! embedding can be retrained from the accumulated data.
//!
//! [`router`] exposes the service as JSON endpoints:
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | POST | `/sessions` | `{client_tag?}` | `{session_id, version, query}` |
//! | GET | `/sessions` | | `[{session_id, client_tag, step, status, version, idle_secs}]` |
//! | GET | `/sessions/{id}` | | `{session_id, client_tag, step, status, version, idle_secs}` |
//! | POST | `/sessions/{id}/answer` | `{query_id, chosen}` | `{status, query}` |
//! | POST | `/sessions/{id}/found` | `{target}` | `{summary}` |
//! | GET | `/objects/{id}` | | `{id, label, image_ref}` |
//! | GET | `/health` | | `{status, version, objects, triplets, sessions}` |
//! | POST | `/admin/retrain` | | `{version, triplets, sigma_eps}` |
//!
//! Errors are `{error, detail}` with 400, 404, 409, 500 or 503.

mod api;
mod config;
mod engine;
mod error;
mod persist;

pub use api::{router, serve, serve_on};
pub use config::ServiceConfig;
pub use engine::{
    Candidate, Catalog, FoundSummary, Health, ModelVersion, Query, RetrainSummary, Service, SessionInfo, SessionState, Started,
    Stepped,
};
pub use error::ServiceError;
pub use persist::DataDir;
