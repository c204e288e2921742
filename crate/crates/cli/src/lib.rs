//! Command line front end: configuration files, run orchestration, grids,
//! rendering and curve plots.

pub mod config;
pub mod grid;
pub mod plot;
pub mod render;
pub mod run;

use std::path::{Path, PathBuf};

use drawdet::error::ErrorClass;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<drawdet::Error>() {
            return match e.class() {
                ErrorClass::Config => EXIT_CONFIG,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Numeric => EXIT_NUMERIC,
                ErrorClass::Other => EXIT_OTHER,
            };
        }
        if cause.is::<clap::Error>() {
            return EXIT_CONFIG;
        }
        if cause.is::<std::io::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_OTHER
}

/// Roots a relative path at `$DRAWDET_OUTPUT_ROOT` when it is set.
pub fn rooted(path: &Path) -> PathBuf {
    match std::env::var_os(config::OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
