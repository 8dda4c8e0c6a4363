//! Command implementations behind the `aunet` binary.

pub mod commands;
pub mod config;
pub mod render;

use aunet::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_RUNTIME: i32 = 5;

/// Maps the first recognised cause in the chain to a process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => EXIT_CONFIG,
                Error::Io { .. } | Error::Format { .. } | Error::Csv(_) | Error::Json(_) => EXIT_IO,
                Error::Checkpoint(_) => EXIT_CHECKPOINT,
                _ => EXIT_RUNTIME,
            };
        }
        if cause.is::<toml::de::Error>() {
            return EXIT_CONFIG;
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_RUNTIME
}
