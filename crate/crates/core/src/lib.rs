//! Secure offloading of floating-point neural-network inference to untrusted
//! workers.
//!
//! The crate is `no_std` (with `alloc`) and contains every piece of the
//! protocol that does not touch an operating system:
//!
//! - [`tensor`] and [`nn`]: a small deterministic f32 inference engine with
//!   per-layer and per-region evaluation.
//! - [`masking`]: one-time additive input masks with precomputed products, and
//!   two-worker additive weight shares.
//! - [`commitment`]: disjoint slicing of tensors into verify units and the
//!   two-level Merkle commitment over an entire inference.
//! - [`protocol`]: the framed wire format and the version handshake.
//! - [`worker`] and [`client`]: the two protocol roles as plain state machines.
//! - [`analysis`]: closed-form failure rates and their Monte Carlo checks.
//!
//! Sockets, files and command-line tools live in the `offload-host` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod analysis;
pub mod client;
pub mod codec;
pub mod commitment;
pub mod container;
pub mod masking;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod tensor;
pub mod worker;

pub use commitment::{MerkleCommit, MerkleProof, UnitLayout};
pub use nn::{LayerSpec, ModelSpec, Padding};
pub use tensor::{Region, Shape, Tensor};

/// Relative tolerance used when comparing recomputed layer outputs.
pub const RECOMPUTE_REL_TOL: f32 = 1e-4;
/// Absolute floor for the recomputation comparison.
pub const RECOMPUTE_ABS_TOL: f32 = 1e-6;

/// Ceiling that ignores float noise below one part per million, so that
/// `1 / 0.01f32` yields 100 units rather than 101.
pub(crate) fn ceil_tolerant(x: f64) -> usize {
    let nudged = x * (1.0 - 1e-6);
    let c = libm::ceil(nudged);
    if c < 0.0 {
        0
    } else {
        c as usize
    }
}

/// `|a - b| <= max(rel * max(|a|, |b|), abs)`.
pub fn approx_eq(a: f32, b: f32, rel: f32, abs: f32) -> bool {
    if a == b {
        return true;
    }
    if !a.is_finite() || !b.is_finite() {
        return false;
    }
    let scale = libm::fabsf(a).max(libm::fabsf(b));
    libm::fabsf(a - b) <= (rel * scale).max(abs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_tolerant_absorbs_f32_ratio_noise() {
        assert_eq!(ceil_tolerant(1.0 / f64::from(0.01f32)), 100);
        assert_eq!(ceil_tolerant(1.0 / 0.01), 100);
        assert_eq!(ceil_tolerant(1.0 / f64::from(0.3f32)), 4);
        assert_eq!(ceil_tolerant(0.1 * 10.0), 1);
        assert_eq!(ceil_tolerant(0.5 * 10.0), 5);
        assert_eq!(ceil_tolerant(0.01 * 100.0), 1);
        assert_eq!(ceil_tolerant(0.0), 0);
    }

    #[test]
    fn approx_eq_uses_relative_and_absolute_bounds() {
        assert!(approx_eq(1.0, 1.00005, 1e-4, 1e-6));
        assert!(!approx_eq(1.0, 1.001, 1e-4, 1e-6));
        assert!(approx_eq(0.0, 5e-7, 1e-4, 1e-6));
        assert!(!approx_eq(f32::NAN, f32::NAN, 1e-4, 1e-6));
    }
}
