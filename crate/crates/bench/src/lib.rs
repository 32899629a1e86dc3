//! Criterion benchmarks for the retrieval engine live in `benches/`.
