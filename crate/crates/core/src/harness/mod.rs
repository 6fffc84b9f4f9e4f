//! Benchmarks, evaluators, configuration, persistence and the CLI.

pub mod benchmarks;
pub mod cli;
pub mod config;
pub mod evaluator;
pub mod experiment;
pub mod journal;

/// Mixes a base seed with a stream index (splitmix64 finalizer) so separate
/// random streams derived from one run seed do not overlap.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
