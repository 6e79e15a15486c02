//! CLI failure taxonomy. Every error knows its process exit code:
//! 1 for environment/I-O problems, 2 for user mistakes (bad config, bad
//! flags, unknown tasks, malformed data files).

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// The environment failed us: missing files, unwritable directories,
    /// I/O interruptions.
    #[error("{0}")]
    Env(String),
    /// The user asked for something invalid: config errors, bad arguments,
    /// unknown tasks, malformed datasets.
    #[error("{0}")]
    User(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Env(_) => 1,
            CliError::User(_) => 2,
        }
    }

    pub fn env(context: &str, err: std::io::Error) -> Self {
        CliError::Env(format!("{context}: {err}"))
    }
}

/// Engine errors surface as user errors: they describe invalid specs,
/// unknown tasks, or data that violates a contract the user controls.
impl From<twta_core::Error> for CliError {
    fn from(e: twta_core::Error) -> Self {
        CliError::User(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Read with path context; missing files are environment errors.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::env(&format!("reading {}", path.display()), e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::env(&format!("reading {}", path.display()), e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::env(&format!("creating {}", parent.display()), e))?;
        }
    }
    std::fs::write(path, bytes)
        .map_err(|e| CliError::env(&format!("writing {}", path.display()), e))
}
