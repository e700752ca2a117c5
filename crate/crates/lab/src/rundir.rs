//! Run directories and their lockfile.

use std::fs::OpenOptions;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use crate::error::{LabError, LabResult};

pub const LOCK_FILE: &str = ".lock";

/// An output directory owned by one command until dropped.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    /// Creates the directory if needed and takes its lock.
    pub fn open(path: &Path) -> LabResult<Self> {
        std::fs::create_dir_all(path).map_err(|e| LabError::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(Self {
                path: path.to_path_buf(),
                lock,
            }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(LabError::Busy(path.to_path_buf())),
            Err(e) => Err(LabError::io(&lock, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}
