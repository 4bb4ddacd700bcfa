//! Command-line front end for the adchain simulator: scenario runs, chain
//! inspection and the benchmark suites.

pub mod bench;
