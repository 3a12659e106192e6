//! Criterion benchmarks for the evklab kernels live under `benches/`.
