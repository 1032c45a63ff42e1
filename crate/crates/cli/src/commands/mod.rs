pub mod calibrate;
pub mod export;
pub mod gen_corpus;
pub mod sweep;
pub mod train;
pub mod verify;

use std::process::ExitCode;

/// Usage-error exit (bad flag values detected after parsing).
pub fn usage_error(msg: &str) -> anyhow::Result<ExitCode> {
    eprintln!("usage error: {msg}");
    Ok(ExitCode::from(2))
}
