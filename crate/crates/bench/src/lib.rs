//! Benchmarks for the numeric kernels and the training step live under `benches/`.
