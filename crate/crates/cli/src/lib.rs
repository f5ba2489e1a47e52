//! Library backing the `edit-bench` binary: verification suites, the
//! timing harness, FLOP reports and weight-container commands.

pub mod bench;
pub mod flops_cmd;
pub mod verify;
pub mod weights_cmd;

/// Exit codes: 0 success, 1 verification failure, 2 usage error,
/// 3 I/O error.
pub fn error_exit_code(e: &edit_core::Error) -> u8 {
    use edit_core::Error;
    match e {
        Error::Io(_) | Error::BadMagic(_) | Error::VersionMismatch(_) | Error::Truncated(_) => 3,
        Error::Config(_) => 2,
        _ => 1,
    }
}
