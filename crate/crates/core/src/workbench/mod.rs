//! Configuration, persistence, reports and the experiment pipeline behind
//! the command-line tool.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{Analysis, ExperimentConfig, Method};
pub use manifest::Manifest;
pub use pipeline::{run_experiment, MethodRun, Models, RunOutput};
pub use report::Reports;

/// Process exit codes of the command-line tool.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const RUNTIME: i32 = 3;
}

/// Exit code for an error raised while running a command.
pub fn exit_code(err: &crate::Error) -> i32 {
    match err {
        crate::Error::Config { .. } => exit::CONFIG,
        _ => exit::RUNTIME,
    }
}
