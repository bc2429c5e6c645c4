pub mod compare;
pub mod config;
pub mod dplio;
pub mod error;
pub mod experiment;

pub use error::{CliError, Result};
