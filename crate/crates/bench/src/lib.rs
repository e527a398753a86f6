//! Criterion benchmarks for the `invtrain` crate live under `benches/`.
