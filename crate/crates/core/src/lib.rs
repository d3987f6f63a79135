#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod aomoa;
pub mod are_adapter;
pub mod backbone;
pub mod dataio;
pub mod error;
pub mod hypert;
pub mod image;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod profile;

pub use error::{Error, Result};
