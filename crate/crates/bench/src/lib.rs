//! Criterion benchmarks for the fedseg kernels live under `benches/`.
