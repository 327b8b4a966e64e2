//! Benchmarks for the decopt kernels live under `benches/`.
