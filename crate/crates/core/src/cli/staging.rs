use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const STAGING: &str = ".staging";

/// Collects a command's outputs in a hidden directory and moves them into the
/// run directory only on [`Stage::commit`]. Dropping an uncommitted stage
/// deletes everything written so far; files already in the run directory are
/// left alone.
#[derive(Debug)]
pub struct Stage {
    dir: PathBuf,
    tmp: PathBuf,
    committed: bool,
}

impl Stage {
    pub fn new(dir: &Path) -> Result<Stage> {
        let tmp = dir.join(STAGING);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        Ok(Stage { dir: dir.to_path_buf(), tmp, committed: false })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }

    pub fn commit(mut self) -> Result<()> {
        let entries = fs::read_dir(&self.tmp).map_err(|e| Error::io(&self.tmp, e))?;
        let mut names = Vec::new();
        for entry in entries {
            names.push(entry.map_err(|e| Error::io(&self.tmp, e))?.file_name());
        }
        names.sort();
        for name in names {
            let to = self.dir.join(&name);
            fs::rename(self.tmp.join(&name), &to).map_err(|e| Error::io(&to, e))?;
        }
        fs::remove_dir(&self.tmp).map_err(|e| Error::io(&self.tmp, e))?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Stage {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}
