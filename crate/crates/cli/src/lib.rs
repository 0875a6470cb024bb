//! Command-line experiment runner for the `mflab-core` library.
//!
//! Scenarios are JSON files; each run writes `<prefix>.csv` and
//! `<prefix>.summary.json`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod csv;
pub mod experiments;
pub mod runner;
pub mod scenario;
