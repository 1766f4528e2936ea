//! File formats, threaded execution and the command-line tool around
//! `femba-core`.
//!
//! * [`container`]: the `FMBC` tensor container.
//! * [`checkpoint`]: float checkpoints and integer images on top of it.
//! * [`recording`]: `FEMB-SIG` recordings, window archives and sidecars.
//! * [`config`]: the key-value configuration file.
//! * [`exec`]: the thread-pool executor.
//! * [`cli`]: subcommands and exit codes.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod exec;
pub mod recording;

mod error;

pub use error::{Error, Result};
