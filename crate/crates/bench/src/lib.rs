//! Criterion benchmarks for the forward, backward and coupled sweeps live in
//! `benches/`; run them with `cargo bench -p dgff-bench`.
