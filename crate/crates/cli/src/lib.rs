//! Library surface of the command-line tool: model persistence, run
//! configuration, and the command implementations. The `deepgp` binary is
//! a thin argument-parsing wrapper over this crate.

pub mod artifact;
pub mod commands;
pub mod config;
pub mod error;
