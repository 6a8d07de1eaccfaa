// Benchmark helpers live in benches/; the crate exists for the bench targets.
