//! Monitoring pipeline: record emission, the shoveler, the collector and
//! accounting over the collector's record log.

pub mod accounting;
mod collector;
mod emitter;
mod shoveler;

pub use collector::{Collector, CollectorCounters, CollectorServer, FrameOutcome};
pub use emitter::{MonitorEmitter, Transfer, XferIds};
pub use shoveler::{
    drain_connection, Backoff, IngestOutcome, Shoveler, ShovelerConfig, ShovelerCounters,
    ShovelerQueue, DEFAULT_QUEUE_BOUND,
};
