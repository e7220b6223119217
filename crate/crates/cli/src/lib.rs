//! Command implementations behind the `fghash` binary.

pub mod commands;
pub mod config;

pub use config::{ConfigError, RunConfig};

/// Process exit status for a failed command: 2 for configuration and flag
/// errors, 3 for numeric failures during training, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(fghash::Error::NonFinite(_)) = cause.downcast_ref::<fghash::Error>() {
            return 3;
        }
    }
    1
}
