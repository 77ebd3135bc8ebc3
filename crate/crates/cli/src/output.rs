//! Output files are written under temporary names inside the output
//! directory and renamed only when the whole command has succeeded.

use std::path::{Path, PathBuf};

use timegrad::{Error, Result};

pub struct Staging {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl Staging {
    pub fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Staging {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            committed: false,
        })
    }

    /// Temporary path for the output `name`, a plain file name.
    pub fn file(&mut self, name: &str) -> Result<PathBuf> {
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(Error::Config(format!("output name {name:?} must be a plain file name")));
        }
        let tmp = self.dir.join(format!(".{name}.partial"));
        self.files.push((tmp.clone(), self.dir.join(name)));
        Ok(tmp)
    }

    /// Renames every staged file to its final name; returns the final paths.
    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        for (tmp, dst) in &self.files {
            std::fs::rename(tmp, dst).map_err(|e| Error::io(dst, e))?;
        }
        self.committed = true;
        Ok(self.files.iter().map(|(_, d)| d.clone()).collect())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for (tmp, _) in &self.files {
            let _ = std::fs::remove_file(tmp);
        }
        if self.created_dir {
            // only succeeds when nothing else was put there
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}
