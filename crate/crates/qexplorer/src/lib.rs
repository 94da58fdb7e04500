//! File-backed pipeline, command line and auditor service around
//! `qexplorer-core`.

pub mod artifacts;
pub mod config;
mod error;
pub mod io;
pub mod pipeline;
pub mod service;
pub mod stages;

pub use error::Error;
