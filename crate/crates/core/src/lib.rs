#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod cvae;
pub mod data;
pub mod encoder;
pub mod error;
pub mod forecast;
pub mod gradcheck;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
