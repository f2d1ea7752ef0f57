pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod plot;

use dvpo_core::LabError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_MISSING: i32 = 5;

/// Process exit status for an error.
pub fn exit_code(e: &LabError) -> i32 {
    match e {
        LabError::Config(_) => EXIT_CONFIG,
        LabError::MissingArtifact(_) => EXIT_MISSING,
        e if e.is_numeric() => EXIT_NUMERIC,
        LabError::Num(_)
        | LabError::NoConvergence { .. }
        | LabError::Singular
        | LabError::NonTerminating
        | LabError::CapExceeded { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}
