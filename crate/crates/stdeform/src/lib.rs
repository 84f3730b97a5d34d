//! Verification suites, scaling benchmarks and a demo for the
//! `stdeform-core` attention kernels, with config parsing and CSV/JSON
//! reporting.
//!
//! Exit codes are `0` on success, `1` when a verification fails and `2` for
//! configuration errors.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
