//! Multiscale sparse-tensor point cloud geometry codec.
//!
//! The pipeline progressively downscales a voxelized point cloud, then codes
//! the occupancy of each scale's candidate voxels with probabilities produced
//! by sparse-convolutional occupancy models, driving a binary range coder.
//! Lossless and lossy modes share the same machinery.

pub mod codec;
pub mod entropy;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod ply;
pub mod sopa;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// FNV-1a 64-bit hash, used for model and bitstream checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
