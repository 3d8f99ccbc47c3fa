//! Oracles shared by the integration tests and the acceptance suite.

// each test target uses a different subset
#![allow(dead_code)]

pub mod jacobians;
pub mod linear;
pub mod nbt;
pub mod scene;
