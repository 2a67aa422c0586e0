//! Criterion benchmarks for the toolkit's hot paths; see `benches/`.
