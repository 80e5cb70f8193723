//! Command implementations and the HTTP service for the `stgan` binary.

pub mod api;
pub mod commands;
pub mod serve;
