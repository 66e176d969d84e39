//! File formats, a threaded executor and the `uts` command-line front-end
//! around [`uts_core`].
//!
//! - [`io`] reads and writes PNG/PPM images.
//! - [`manifest`] holds the per-tile CSV manifest.
//! - [`checkpoint`] stores binary model checkpoints.
//! - [`config`] parses `key = value` run configuration files.
//! - [`exec`] is a scoped-thread [`Executor`](uts_core::train::Executor).
//! - [`cli`] wires up the subcommands.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod exec;
pub mod io;
pub mod manifest;

pub use uts_core as core;
