//! Gateway for fairgate: file persistence, the shared service layer, the
//! `/v1` HTTP API and the command-line interface.

pub mod cli;
pub mod config;
pub mod error;
pub mod http;
pub mod persist;
pub mod service;
