//! Checks shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod alignment;
pub mod composed;
pub mod gradients;
