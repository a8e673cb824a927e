#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;

pub mod autograd;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod imaging;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synthesis;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
