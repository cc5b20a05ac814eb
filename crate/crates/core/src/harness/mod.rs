//! Operational shell around the library: corpora, checkpoints, metrics and
//! benchmarks.

pub mod bench;
pub mod checkpoint;
pub mod corpus;
pub mod metrics;
pub mod tokenizer;

/// Environment variable that overrides any configured seed.
pub const SEED_ENV: &str = "ECHO_SEED";

/// `ECHO_SEED` when set to an integer, otherwise `fallback`.
pub fn seed_from_env(fallback: u64) -> u64 {
    std::env::var(SEED_ENV)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(fallback)
}
