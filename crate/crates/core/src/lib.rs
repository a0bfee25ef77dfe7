//! Complete critical-point landscapes of likelihood functions on
//! rank-constrained matrix models.
//!
//! Given an m×n table of positive counts and a rank bound r, this crate
//! computes *all* complex critical points of the likelihood function on the
//! variety of rank-≤r matrices (general or symmetric), classifies the real
//! positive ones as maxima/minima/saddles, and cross-validates the landscape
//! three ways: ML duality between ranks r and m−r+1, closed-form root-count
//! bounds, and a multi-start EM baseline.
//!
//! The expensive step — solving the square kernel system once for a generic
//! complex data matrix by monodromy — is persisted as a [`monodromy::SolutionArchive`]
//! so that every subsequent data matrix costs only one parameter homotopy per
//! critical point.

pub mod bounds;
pub mod classify;
pub mod em;
pub mod formulation;
pub mod model;
pub mod monodromy;
pub mod numerics;
pub mod pipeline;
pub mod tracker;

use rand_chacha::rand_core::SeedableRng;

/// Deterministic RNG for a (master seed, stream index) pair.
///
/// Parallel code derives one stream per path/run so results do not depend on
/// scheduling order.
pub fn rng_stream(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.into());
    rng
}
