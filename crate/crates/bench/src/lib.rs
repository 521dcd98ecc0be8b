//! Benchmarks for the `msm-core` hot paths; see `benches/msm.rs`.
