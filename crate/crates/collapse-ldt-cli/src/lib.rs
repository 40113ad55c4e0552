//! Command implementations and the verification checklist behind the
//! `collapse-ldt` binary.

pub mod commands;
pub mod verify;

/// Exit-code contract: 0 success, 1 verification failure, 2 usage error,
/// 3 solver failure.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const VERIFY_FAILED: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const SOLVER: i32 = 3;
}
