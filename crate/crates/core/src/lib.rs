//! Post-training quantization toolkit for small LLaMA-style transformers.
//!
//! The pipeline runs float model -> weight equalization -> calibration of
//! scales, clipping and activation ranges -> integer-only compilation.

pub mod calibrate;
pub mod corpus;
pub mod equalize;
pub mod error;
pub mod format;
pub mod intengine;
pub mod numeric;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod quant;
pub mod toy;

pub use error::{Error, Result};

/// Keeps freed memory in the process heap instead of returning it to the
/// OS. Graph evaluation allocates and frees many large buffers per step;
/// with glibc defaults each step pays the page faults again. Call once at
/// process start; a no-op off glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}
