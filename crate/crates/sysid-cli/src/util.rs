//! File helpers and error-to-exit-code mapping.

use std::fs;
use std::path::Path;

use sysid::SysidError;

/// Exit codes: 0 success, 1 numerical/training failure, 2 usage or I/O.
#[derive(Debug, Clone)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: msg.into(),
        }
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: msg.into(),
        }
    }
}

impl From<SysidError> for Failure {
    fn from(e: SysidError) -> Self {
        let code = match &e {
            SysidError::Io { .. }
            | SysidError::Csv(_)
            | SysidError::MalformedData { .. }
            | SysidError::InvalidConfig(_)
            | SysidError::InvalidSpec(_)
            | SysidError::Serialization(_)
            | SysidError::DimensionMismatch { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

/// Write a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, content: &str) -> Result<(), Failure> {
    let tmp = {
        let mut os = path.as_os_str().to_owned();
        os.push(".tmp");
        std::path::PathBuf::from(os)
    };
    fs::write(&tmp, content)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| Failure::usage(format!("cannot rename into {}: {e}", path.display())))?;
    Ok(())
}

pub fn read_to_string(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))
}
