//! Library half of the command-line tool, exposed so integration tests can
//! drive commands in-process. The binary in `main.rs` only parses flags,
//! maps errors to exit codes, and prints.

pub mod commands;
pub mod config;
pub mod render;
