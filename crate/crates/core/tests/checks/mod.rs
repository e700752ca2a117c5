//! Check suites shared by the core tests and the acceptance run.
#![allow(dead_code)]

pub mod gradients;
pub mod mckp;
pub mod quant;
