//! Command-line tools and the live session service.

pub mod commands;
pub mod protocol;
pub mod server;
