//! Shared helpers for the integration tests and the acceptance binary.
#![allow(dead_code)]

pub mod conjugate;
pub mod estimators;
pub mod gradcheck;
pub mod rows;
pub mod tiny;
