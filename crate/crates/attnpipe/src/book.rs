//! Runs the guide's code snippets as doctests.
//!
//! mdBook cannot execute the Rust listings in `book/src/*.md`, so each
//! chapter is attached here as a doc comment and `cargo test --doc` checks
//! them. One module per chapter keeps failures attributable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/quantized-preselection.md")]
pub mod quantized_preselection {}

#[doc = include_str!("../../../book/src/sparse-attention.md")]
pub mod sparse_attention {}

#[doc = include_str!("../../../book/src/encoder-graph.md")]
pub mod encoder_graph {}

#[doc = include_str!("../../../book/src/pipeline-simulation.md")]
pub mod pipeline_simulation {}

#[doc = include_str!("../../../book/src/workloads-and-cli.md")]
pub mod workloads_and_cli {}
