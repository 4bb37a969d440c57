//! Microbenchmarks for the kernels on the streaming hot path. Run with
//! `cargo bench -p roadnoise-bench`; the measurements live in
//! `benches/kernels.rs`.
