//! Command-line layer: run configuration, the five verbs, evaluation output
//! and the loss ablation harness.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod eval;

use fsvos::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Process exit status for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::Numeric(_)) => EXIT_NUMERIC,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn exit_codes_survive_context() {
        let e: anyhow::Result<()> = Err(Error::config("x")).context("loading");
        assert_eq!(exit_code(&e.unwrap_err()), EXIT_CONFIG);
        let e = anyhow::Error::from(Error::Numeric("nan".into()));
        assert_eq!(exit_code(&e), EXIT_NUMERIC);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }
}
