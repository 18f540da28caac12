//! Desk-scale data federation: origins, caches and a redirector speaking a
//! small line protocol, a nearest-cache client, a UDP → TCP monitoring
//! pipeline with accounting, and an end-to-end health-check suite.

pub mod access;
pub mod cache;
pub mod client;
pub mod clock;
pub mod harness;
pub mod health;
pub mod model;
pub mod monitoring;
pub mod net;
pub mod origin;
pub mod redirector;
pub mod wire;
