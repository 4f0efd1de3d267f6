//! Files, configuration and commands around [`vice_core`].

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;

pub use error::{Result, ViceError};
pub use vice_core;
