//! File formats, training driver, HTTP service and CLI around
//! [`compogan_core`].

pub mod archive;
pub mod bank_io;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod imageio;
pub mod inference;
pub mod runner;
pub mod service;
pub mod tables;

pub use compogan_core as core;
