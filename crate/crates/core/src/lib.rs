//! Core of the dynamic post-training quantization laboratory.
//!
//! Everything in this crate is pure computation over `alloc` collections:
//! a small reverse-mode autodiff engine, uniform quantizers, the exact
//! multiple-choice knapsack bit-width allocator, the classifier and policy
//! networks, the three training stages, and the diagnostic analyses.
//! File formats, configuration and the command line live in `dptq-lab`.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod analysis;
pub mod autodiff;
pub mod budget;
pub mod data;
mod error;
pub mod math;
pub mod nn;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
