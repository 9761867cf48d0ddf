//! Segmentation metrics, supervision memory accounting and timing.

pub mod bench;
pub mod memory;
pub mod metrics;

pub use bench::{bench, BenchStats};
pub use memory::{supervision_memory, MemoryReport};
pub use metrics::ConfusionMatrix;
