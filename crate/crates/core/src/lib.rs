//! Explicit decision layers for LLM-style control loops.
//!
//! Signals are computed by estimators, policies map signals to actions, and
//! environments execute the chosen action. Each piece is a separate
//! component, and every turn is logged to an [`trace::EpisodeTrace`] so
//! failures can be replayed and attributed offline.
//!
//! Environments:
//! - [`calendar`]: clarify or execute a calendar booking
//! - [`graph`]: find a person in an organisation graph under two beliefs
//! - [`retrieval`]: stop or expand a BM25 top-k passage set

pub mod calendar;
pub mod decision;
pub mod error;
pub mod graph;
pub mod harness;
pub mod report;
pub mod retrieval;
pub mod signal;
pub mod trace;

pub use error::{Error, Result};

/// Mixes a base seed with a path of integers (splitmix64 finalizer).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut z = base;
    for &p in path {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Rounds to `places` decimals, for comparisons against reference figures.
pub fn round_to(x: f64, places: i32) -> f64 {
    let f = 10f64.powi(places);
    (x * f).round() / f
}
