use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.txt";

/// An output directory that starts empty and is sealed by a manifest.
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        if path.exists() {
            if !path.is_dir() {
                bail!("output path {} exists and is not a directory", path.display());
            }
            if fs::read_dir(path)?.next().is_some() {
                bail!("output directory {} is not empty; runs are write-once", path.display());
            }
        }
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.join(name);
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&p)
            .with_context(|| format!("writing {}", p.display()))?;
        f.write_all(contents.as_ref())?;
        Ok(())
    }

    /// Write `manifest.txt`: the config echo followed by one
    /// `sha256  name` line per output file, sorted by name.
    pub fn seal(self, echo: &str) -> Result<()> {
        let mut names: Vec<String> = fs::read_dir(&self.path)?
            .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        let mut s = String::from(echo);
        s.push_str("\n[outputs]\n");
        for n in names {
            let p = self.path.join(&n);
            if !p.is_file() {
                continue;
            }
            let _ = writeln!(s, "{}  {n}", sha256_hex(&fs::read(&p)?));
        }
        self.write(MANIFEST, s)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
