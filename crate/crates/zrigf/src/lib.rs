//! IO, file formats and command implementations for the ZRIGF pipeline.
//!
//! The algorithmic core lives in `zrigf-core`; this crate adds what needs an
//! operating system: PPM images, JSONL corpora, the binary index and
//! checkpoint formats, and the CLI commands that wire them together.

pub mod commands;
pub mod formats;
pub mod store;

pub use zrigf_core as core;
