#![no_std]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod backbone;
pub mod vocab;
pub mod vip;
pub mod prune;
pub mod training;
pub mod costmodel;

#[cfg(test)]
mod testutil;
