#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod math;
pub mod objective;
pub mod regions;
pub mod seed;
pub mod superpixel;
pub mod synth;
pub mod training;
pub mod viewgen;

pub use error::{Error, Result};
