//! Benchmark-only crate; see `benches/pipeline.rs`. The library target
//! exists so the package builds on its own.
