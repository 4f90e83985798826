//! Mixture-of-experts routing testbed: corpus generation, routing and
//! balancing, a trainable small MoE language model, metrics and the
//! experiment harness.

pub mod balancing;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod splitter;

pub use error::{Error, Result};

/// Serve large per-step buffers from the heap rather than fresh mmaps. Call
/// once at startup, before spawning threads.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
pub fn tune_allocator() {
    // SAFETY: mallopt only adjusts allocator parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
pub fn tune_allocator() {}
