//! Criterion benchmarks for the dynema hot paths; see `benches/policy.rs`.
