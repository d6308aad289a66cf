//! Federation service: identity, task fabric, blob store, experiment
//! orchestrator, REST API, HTTP client and client agent.

pub mod agent;
pub mod api;
pub mod blobstore;
pub mod client;
pub mod clock;
pub mod error;
pub mod experiment;
pub mod fabric;
pub mod identity;
pub mod metrics_log;
pub mod orchestrator;
pub mod server;
