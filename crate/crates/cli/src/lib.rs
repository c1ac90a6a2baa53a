//! Library surface of the quantlab binary: configuration resolution and
//! command implementations, exposed so integration tests can build
//! configs with the same types the binary deserializes.

pub mod commands;
pub mod config;
