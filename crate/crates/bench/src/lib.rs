//! Criterion benchmarks for nanoflow live under `benches/`.
