//! Criterion benchmarks for dropin-core live under `benches/`.
