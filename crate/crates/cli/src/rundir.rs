//! Run directory layout, manifest and writer lock.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use probssl::config::RunConfig;
use probssl::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";
pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const RESULTS_DIR: &str = "results";
pub const LOCK: &str = ".lock";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub code_version: String,
    pub seed: u64,
    pub status: RunStatus,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// Set when the run aborted.
    pub error: Option<String>,
    /// Directory that relative data paths in the config resolve against.
    pub data_root: PathBuf,
    pub config: RunConfig,
    pub files: Vec<FileEntry>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(config: &RunConfig, data_root: &Path) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            status: RunStatus::Running,
            started_unix: unix_now(),
            finished_unix: None,
            error: None,
            data_root: data_root.to_path_buf(),
            config: config.clone(),
            files: Vec::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(Error::Checkpoint(format!("unsupported manifest version {}", m.manifest_version)));
        }
        Ok(m)
    }

    /// Re-inventories the directory and writes the manifest atomically.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        self.files = inventory(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&dir.join(MANIFEST), text.as_bytes())
    }

    pub fn finish(&mut self, dir: &Path, error: Option<String>) -> Result<()> {
        self.status = if error.is_some() { RunStatus::Aborted } else { RunStatus::Complete };
        self.error = error;
        self.finished_unix = Some(unix_now());
        self.save(dir)
    }

    /// Paths whose size or checksum no longer match the inventory.
    pub fn stale_files(&self, dir: &Path) -> Result<Vec<String>> {
        let now = inventory(dir)?;
        let mut stale: Vec<String> = self.files.iter().filter(|f| !now.contains(f)).map(|f| f.path.clone()).collect();
        stale.extend(now.iter().filter(|f| !self.files.iter().any(|g| g.path == f.path)).map(|f| f.path.clone()));
        Ok(stale)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Every file under `dir` except the manifest, the lock and temporaries,
/// sorted by path.
pub fn inventory(dir: &Path) -> Result<Vec<FileEntry>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
                continue;
            }
            let rel = path.strip_prefix(root).expect("walk stays under root");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            if rel == MANIFEST || rel == LOCK || rel.ends_with(".tmp") {
                continue;
            }
            out.push(FileEntry {
                bytes: fs::metadata(&path)?.len(),
                sha256: sha256_file(&path)?,
                path: rel,
            });
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

/// Exclusive writer lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(Error::Io(io::Error::new(
                e.kind(),
                format!("{} is locked by another writer (remove {} if stale)", dir.display(), path.display()),
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Makes `dir` an empty directory. A non-empty directory is only cleared
/// with `force`, and only if it already holds a run manifest.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if !dir.exists() {
        fs::create_dir_all(dir)?;
        return Ok(());
    }
    if fs::read_dir(dir)?.next().is_none() {
        return Ok(());
    }
    let refuse = |msg: String| Err(Error::Io(io::Error::new(io::ErrorKind::AlreadyExists, msg)));
    if !force {
        return refuse(format!("{} is not empty; pass --force to overwrite", dir.display()));
    }
    if dir.join(LOCK).exists() {
        return refuse(format!("{} is locked by another writer", dir.display()));
    }
    if !dir.join(MANIFEST).exists() {
        return refuse(format!("{} is not a run directory; refusing to clear it", dir.display()));
    }
    fs::remove_dir_all(dir)?;
    fs::create_dir_all(dir)?;
    Ok(())
}
