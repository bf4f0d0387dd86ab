//! Result files are collected in memory and committed together at the end
//! of a command, so a failing command leaves nothing behind.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use spnas::io::write_atomic;

#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((path.into(), bytes.into()));
    }

    /// Write every staged file. Directories and files created before a
    /// failure are removed again.
    pub fn commit(self) -> Result<Vec<PathBuf>> {
        let mut made_dirs: Vec<PathBuf> = Vec::new();
        let mut written: Vec<PathBuf> = Vec::new();
        let result = (|| -> Result<()> {
            for (path, bytes) in &self.files {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    create_dir_tracked(dir, &mut made_dirs)?;
                }
                if path.exists() {
                    anyhow::ensure!(path.is_file(), "{} exists and is not a file", path.display());
                }
                write_atomic(path, bytes)?;
                written.push(path.clone());
            }
            Ok(())
        })();
        if let Err(e) = result {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            for d in made_dirs.iter().rev() {
                let _ = fs::remove_dir(d);
            }
            return Err(e);
        }
        Ok(written)
    }
}

fn create_dir_tracked(dir: &Path, made: &mut Vec<PathBuf>) -> Result<()> {
    let missing: Vec<&Path> = dir.ancestors().take_while(|a| !a.as_os_str().is_empty() && !a.exists()).collect();
    for d in missing.into_iter().rev() {
        fs::create_dir(d).with_context(|| format!("creating {}", d.display()))?;
        made.push(d.to_path_buf());
    }
    Ok(())
}
