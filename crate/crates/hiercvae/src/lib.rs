//! File formats, data loading, checkpointing and the command-line front end
//! for [`hiercvae_core`].

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod outputs;
pub mod pipeline;
pub mod runconfig;
pub mod table_io;

pub use error::{AppError, AppResult};
