use std::fs;
use std::path::{Path, PathBuf};

use crate::failure::Failure;

/// Output directory of one run. Files written through it are removed again
/// if the run fails, along with the directory itself when the run created it.
pub struct OutDir {
    root: PathBuf,
    created: Vec<PathBuf>,
    written: Vec<PathBuf>,
    committed: bool,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, Failure> {
        let mut created = Vec::new();
        let mut missing = Vec::new();
        let mut p = root;
        while !p.as_os_str().is_empty() && !p.exists() {
            missing.push(p.to_path_buf());
            match p.parent() {
                Some(parent) => p = parent,
                None => break,
            }
        }
        fs::create_dir_all(root).map_err(|e| Failure::io(root, e))?;
        created.extend(missing);
        Ok(Self {
            root: root.to_path_buf(),
            created,
            written: Vec::new(),
            committed: false,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, Failure> {
        let path = self.path(name);
        self.written.push(path.clone());
        fs::write(&path, bytes).map_err(|e| Failure::io(&path, e))?;
        Ok(path)
    }

    /// Registers a file written by other code under this directory.
    pub fn track(&mut self, name: &str) -> PathBuf {
        let path = self.path(name);
        self.written.push(path.clone());
        path
    }

    /// File names written so far, in order.
    pub fn names(&self) -> Vec<String> {
        self.written
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect()
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
        // innermost first; only directories this run made, and only if empty
        for d in &self.created {
            let _ = fs::remove_dir(d);
        }
    }
}
