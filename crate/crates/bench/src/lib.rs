//! Criterion benchmarks for `mnsp-core` live in `benches/`; this crate has
//! no library code of its own.
