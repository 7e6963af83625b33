//! Command-line tool and HTTP service for decision maps.

pub mod cli;
pub mod server;
