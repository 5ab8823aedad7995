//! Command implementations behind the `tcim` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

pub use config::{FitKind, RunConfig};

/// Process exit code for an error: 3 for numerical failures, 2 for
/// everything else (bad input, validation, schema).
pub fn exit_code(err: &tcim_core::Error) -> i32 {
    if err.is_numerical() {
        3
    } else {
        2
    }
}
