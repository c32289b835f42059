//! Files, configuration, checkpoints and command drivers around
//! [`mafnet_core`].

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod gradsuite;
pub mod image_io;

pub use error::{Error, Result};
