//! Command line and HTTP front end over [`flywheel_core`] sessions.

pub mod cli;
pub mod server;

use flywheel_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFICATION: i32 = 2;
pub const EXIT_DATA: i32 = 3;

/// Process exit code for a core error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_)
        | Error::NotFound(_)
        | Error::Conflict(_)
        | Error::UnsupportedKind { .. }
        | Error::OutOfDomain(_) => EXIT_USAGE,
        Error::MergeRefused(_) => EXIT_VERIFICATION,
        _ => EXIT_DATA,
    }
}
