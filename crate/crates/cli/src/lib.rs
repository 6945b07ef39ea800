//! File formats and subcommands of the `adasfm` tool.

pub mod commands;
pub mod io;
