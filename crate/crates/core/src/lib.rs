//! Text-guided sounding object segmentation on a synthetic benchmark.
//!
//! The crate is `no_std` with `alloc`; the `std` feature (on by default) only
//! switches dependencies to their std builds.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod config;
pub mod encoders;
pub mod eval;
pub mod error;
pub mod hash;
pub mod math;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pmqs;
pub mod rng;
pub mod sedam;
pub mod segmodel;
pub mod synthdata;
pub mod tensor;
pub mod textcues;
pub mod train;

pub use error::{Error, Result};
