//! Discrete-event simulator of an SSD array whose members collect garbage
//! independently, fronted by a set-associative write-back page cache and a
//! background dirty-page flusher.

pub mod cache;
pub mod cli;
pub mod engine;
pub mod flusher;
pub mod mapping;
pub mod metrics;
pub mod queues;
pub mod ssd;
pub mod workload;
