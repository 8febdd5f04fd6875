//! Multi-scale no-reference image quality assessment.
//!
//! A small convolutional backbone is shared by one regression head per zoom
//! level (resize / crop pipeline). Training sums a weighted MSE + PLCC loss
//! over all heads; inference scores either the full image with the best head
//! or averages a fixed grid of multi-scale, transposed patches.

pub mod augment;
pub mod datasets;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod ndgrad;
pub mod scalar;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = ndgrad::Tensor<f32>;
/// Gradient-check precision tensor.
pub type Tensor64 = ndgrad::Tensor<f64>;
pub type Tape32 = ndgrad::Tape<f32>;
pub type Tape64 = ndgrad::Tape<f64>;
pub type Model32 = model::MultiHeadModel<f32>;
pub type Model64 = model::MultiHeadModel<f64>;

/// Keeps freed memory in the process heap instead of handing it back to the
/// OS. Training frees and reallocates tens of megabytes per layer every
/// step; with glibc's defaults each of those buffers is a fresh mmap whose
/// page faults cost more than the arithmetic. Call once at startup. A no-op
/// off glibc.
pub fn retain_heap() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_MAX, 0);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
