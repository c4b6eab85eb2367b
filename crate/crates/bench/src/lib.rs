//! Criterion benchmarks for the scheduler live under `benches/`.
