//! A vision-language single-object tracker, self-contained in pure Rust.
//!
//! The tracker follows a natural-language description plus a first-frame
//! box through a video. Language guidance distinguishes *target words*
//! (describing the object itself) from *context words* (describing
//! surroundings), calibrates context cues against visual memory, and
//! injects both into the search features; visual guidance maintains a
//! target-context heatmap from template correlation and a FIFO memory of
//! compressed target states. A small convolutional head decodes the
//! guided features into a box.
//!
//! Everything is built on an in-crate reverse-mode autodiff tape
//! ([`tensor::Graph`]) over dense `f64` tensors — no external ML
//! runtime — which keeps training fully deterministic for a fixed seed.
//!
//! The crate is organized as a library plus runnable `examples/`; the
//! thin `tctrack` binary exposes dataset generation, training, tracking,
//! evaluation, heatmap inspection, and word-role probing as subcommands.

pub mod annotate;
pub mod boxes;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod head;
pub mod image;
pub mod loss;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod probe;
pub mod synthetic;
pub mod tensor;
pub mod text_guidance;
pub mod track;
pub mod train;
pub mod visual_guidance;

pub use error::{Error, Result};

/// Entry point for the `tctrack` binary; returns the process exit code.
pub fn run_cli() -> i32 {
    cli::run(std::env::args_os())
}
