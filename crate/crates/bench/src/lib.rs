//! Criterion benchmarks for the drafting forward, tree verification and
//! end-to-end generation live in `benches/forward.rs`.
