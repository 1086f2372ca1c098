//! Quantized top-k sparse attention and length-aware pipeline scheduling.
//!
//! The crate has two halves that meet in the experiment runner:
//!
//! * an attention operator that pre-selects candidate keys with low-bit
//!   quantized scores ([`numerics`], [`attention`]), and
//! * a coarse-grained encoder pipeline model: operator DAG with
//!   length-parameterized costs, critical-path priorities, stage allocation
//!   under a compute-unit budget ([`encoder_graph`]), and a discrete-event
//!   simulator that schedules variable-length batches through the stages
//!   and measures what padding baselines cost ([`pipeline`]).
//!
//! [`workload`] ties both together: config files, synthetic length
//! distributions, experiment orchestration and report emission. The `attnpipe`
//! binary in the companion CLI crate is a thin wrapper over that module.
//!
//! The `book/` directory of the repository walks through each concept with
//! runnable snippets; those snippets compile as doctests of this crate.

pub mod attention;
pub mod encoder_graph;
pub mod error;
pub mod gantt;
pub mod numerics;
pub mod pipeline;
pub mod workload;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book;
