//! Precompiled support libraries, keyed by (library, version, platform).
//!
//! Layout under the cache root:
//!
//! ```text
//! <platform>/<library>/<version>/install/    install prefix, {libdir}
//! <platform>/<library>/<version>/build/      scratch dir, {workdir}
//! <platform>/<library>/<version>/build.log
//! <platform>/<library>/<version>/entry.json  written last; marks a usable entry
//! ```
//!
//! A failed build leaves no entry behind. Concurrent requests for one key
//! are serialized so a cold key is built once.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CommandKind, CommandLog, CommandRecord};
use crate::manifest::{LibrarySpec, PlatformSpec};
use crate::process::{StepLog, StepOutcome};
use crate::template::{self, Vars};

const ENTRY_FILE: &str = "entry.json";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub library_id: String,
    pub version: String,
    pub platform_id: String,
}

impl CacheKey {
    pub fn new(lib: &LibrarySpec, platform: &PlatformSpec) -> Self {
        CacheKey {
            library_id: lib.id.clone(),
            version: lib.version.clone(),
            platform_id: platform.id.clone(),
        }
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}-{} on {}",
            self.library_id, self.version, self.platform_id
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedLibrary {
    pub key: CacheKey,
    pub install_dir: PathBuf,
    pub built_at: DateTime<Utc>,
}

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("library {key} step {step} failed ({outcome}); log: {log_path}")]
    StepFailed {
        key: Box<CacheKey>,
        step: usize,
        outcome: StepOutcome,
        log_path: PathBuf,
        log: String,
    },
    #[error("library {key} step {step} timed out; log: {log_path}")]
    TimedOut {
        key: Box<CacheKey>,
        step: usize,
        log_path: PathBuf,
        log: String,
    },
    #[error("library {key} built but {marker} is missing; log: {log_path}")]
    MarkerMissing {
        key: Box<CacheKey>,
        marker: PathBuf,
        log_path: PathBuf,
        log: String,
    },
    #[error("library cache I/O for {key}: {source}")]
    Io {
        key: Box<CacheKey>,
        source: io::Error,
    },
}

impl LibraryError {
    pub fn log(&self) -> &str {
        match self {
            LibraryError::StepFailed { log, .. }
            | LibraryError::TimedOut { log, .. }
            | LibraryError::MarkerMissing { log, .. } => log,
            LibraryError::Io { .. } => "",
        }
    }

    pub fn is_timeout(&self) -> bool {
        matches!(self, LibraryError::TimedOut { .. })
    }
}

pub struct LibraryCache {
    root: PathBuf,
    flights: Mutex<HashMap<CacheKey, Arc<Mutex<()>>>>,
}

impl LibraryCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        LibraryCache {
            root: root.into(),
            flights: Mutex::new(HashMap::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_dir(&self, key: &CacheKey) -> PathBuf {
        self.root
            .join(&key.platform_id)
            .join(&key.library_id)
            .join(&key.version)
    }

    pub fn install_dir(&self, key: &CacheKey) -> PathBuf {
        self.entry_dir(key).join("install")
    }

    /// The entry for `key`, if present and its marker still exists.
    pub fn lookup(&self, key: &CacheKey, marker: &Path) -> Option<CachedLibrary> {
        let entry: CachedLibrary =
            serde_json::from_slice(&fs::read(self.entry_dir(key).join(ENTRY_FILE)).ok()?).ok()?;
        (entry.key == *key && entry.install_dir.join(marker).exists()).then_some(entry)
    }

    /// Returns the cached build of `lib` for `platform`, building it on a
    /// miss. `env` is the step environment; `timeout` bounds the whole
    /// build.
    pub fn prepare(
        &self,
        lib: &LibrarySpec,
        platform: &PlatformSpec,
        env: &BTreeMap<String, String>,
        timeout: Duration,
        commands: &CommandLog,
    ) -> Result<CachedLibrary, LibraryError> {
        let key = CacheKey::new(lib, platform);
        let flight = {
            let mut flights = self.flights.lock().unwrap_or_else(|e| e.into_inner());
            flights.entry(key.clone()).or_default().clone()
        };
        let _guard = flight.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(hit) = self.lookup(&key, &lib.install_marker) {
            log::debug!("library cache hit: {key}");
            return Ok(hit);
        }
        log::info!("building library {key}");
        let result = self.build(&key, lib, platform, env, timeout, commands);
        if result.is_err() {
            let _ = fs::remove_dir_all(self.install_dir(&key));
            let _ = fs::remove_file(self.entry_dir(&key).join(ENTRY_FILE));
        }
        result
    }

    fn build(
        &self,
        key: &CacheKey,
        lib: &LibrarySpec,
        platform: &PlatformSpec,
        env: &BTreeMap<String, String>,
        timeout: Duration,
        commands: &CommandLog,
    ) -> Result<CachedLibrary, LibraryError> {
        let io_err = |source| LibraryError::Io {
            key: Box::new(key.clone()),
            source,
        };
        let entry_dir = self.entry_dir(key);
        let install_dir = entry_dir.join("install");
        let build_dir = entry_dir.join("build");
        let log_path = entry_dir.join("build.log");
        for dir in [&install_dir, &build_dir] {
            if dir.exists() {
                fs::remove_dir_all(dir).map_err(io_err)?;
            }
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let _ = fs::remove_file(&log_path);
        let mut log = StepLog::create(&log_path).map_err(io_err)?;
        let read_log = |p: &Path| fs::read_to_string(p).unwrap_or_default();

        let vars = Vars {
            workdir: Some(build_dir.display().to_string()),
            libdir: Some(install_dir.display().to_string()),
            ..Vars::default()
        };
        let deadline = Instant::now() + timeout;
        for (i, raw) in lib.build_steps.iter().enumerate() {
            let step_no = i + 1;
            let command = template::expand(raw, &vars)
                .map_err(|e| io_err(io::Error::new(io::ErrorKind::InvalidInput, e)))?;
            commands.record(CommandRecord {
                kind: CommandKind::Library,
                code_id: None,
                platform_id: platform.id.clone(),
                subject: lib.id.clone(),
                command: command.clone(),
            });
            let remaining = deadline.saturating_duration_since(Instant::now());
            let outcome = log
                .run(&crate::process::Step {
                    command: &command,
                    cwd: &build_dir,
                    env,
                    timeout: remaining,
                })
                .map_err(io_err)?;
            match outcome {
                StepOutcome::Exited(0) => {}
                StepOutcome::TimedOut => {
                    return Err(LibraryError::TimedOut {
                        key: Box::new(key.clone()),
                        step: step_no,
                        log: read_log(&log_path),
                        log_path,
                    })
                }
                outcome => {
                    return Err(LibraryError::StepFailed {
                        key: Box::new(key.clone()),
                        step: step_no,
                        outcome,
                        log: read_log(&log_path),
                        log_path,
                    })
                }
            }
        }
        if !install_dir.join(&lib.install_marker).exists() {
            let _ = log.note(&format!(
                "install marker {} not found",
                lib.install_marker.display()
            ));
            return Err(LibraryError::MarkerMissing {
                key: Box::new(key.clone()),
                marker: lib.install_marker.clone(),
                log: read_log(&log_path),
                log_path,
            });
        }
        let entry = CachedLibrary {
            key: key.clone(),
            install_dir,
            built_at: Utc::now(),
        };
        let tmp = entry_dir.join(".entry.json.tmp");
        fs::write(
            &tmp,
            serde_json::to_vec_pretty(&entry).expect("entries serialize"),
        )
        .map_err(io_err)?;
        fs::rename(&tmp, entry_dir.join(ENTRY_FILE)).map_err(io_err)?;
        Ok(entry)
    }

    /// Every committed entry, sorted by key.
    pub fn entries(&self) -> io::Result<Vec<CachedLibrary>> {
        let mut out = Vec::new();
        for platform in read_dirs(&self.root)? {
            for lib in read_dirs(&platform)? {
                for version in read_dirs(&lib)? {
                    if let Ok(bytes) = fs::read(version.join(ENTRY_FILE)) {
                        if let Ok(entry) = serde_json::from_slice::<CachedLibrary>(&bytes) {
                            out.push(entry);
                        }
                    }
                }
            }
        }
        out.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(out)
    }

    /// Removes entries matching the filters (`None` matches everything).
    /// Returns how many were removed.
    pub fn invalidate(&self, library: Option<&str>, platform: Option<&str>) -> io::Result<usize> {
        let mut removed = 0;
        for entry in self.entries()? {
            if library.is_some_and(|l| l != entry.key.library_id)
                || platform.is_some_and(|p| p != entry.key.platform_id)
            {
                continue;
            }
            fs::remove_dir_all(self.entry_dir(&entry.key))?;
            removed += 1;
        }
        Ok(removed)
    }
}

fn read_dirs(dir: &Path) -> io::Result<Vec<PathBuf>> {
    match fs::read_dir(dir) {
        Ok(rd) => {
            let mut dirs = Vec::new();
            for e in rd {
                let e = e?;
                if e.file_type()?.is_dir() {
                    dirs.push(e.path());
                }
            }
            dirs.sort();
            Ok(dirs)
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}
