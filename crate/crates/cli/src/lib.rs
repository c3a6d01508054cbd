//! Command-line front end and WebSocket server for the branch MPC library.

pub mod commands;
pub mod config;
pub mod protocol;
pub mod server;
