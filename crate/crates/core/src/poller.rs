//! Repository change detection.
//!
//! Each cycle probes every code for its current revision, enqueues a test
//! run for each code whose revision moved, and only then persists the new
//! revisions. A crash between enqueue and persist makes the next cycle
//! detect the same change again: runs may be duplicated, never lost.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{CodeSpec, Manifest};
use crate::process::{self, Step, StepOutcome};
use crate::queue::{JobId, JobPayload, LogStore, Queue, QueueError};

pub const DEFAULT_POLL_INTERVAL_S: u64 = 300;
pub const DEFAULT_PROBE_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum PollError {
    #[error("poll state {path}: {source}")]
    State { path: PathBuf, source: io::Error },
    #[error("poll state {path} is unreadable: {message}")]
    BadState { path: PathBuf, message: String },
    #[error(transparent)]
    Queue(#[from] QueueError),
}

/// Last revision seen per code.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PollState {
    pub revisions: BTreeMap<String, String>,
    pub updated_at: Option<DateTime<Utc>>,
}

impl PollState {
    /// Loads the state file; a missing file is an empty state.
    pub fn load(path: &Path) -> Result<Self, PollError> {
        match fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| PollError::BadState {
                path: path.to_path_buf(),
                message: e.to_string(),
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(PollState::default()),
            Err(source) => Err(PollError::State {
                path: path.to_path_buf(),
                source,
            }),
        }
    }

    /// Writes via a synced temporary file and rename, so readers see either
    /// the old or the new state.
    pub fn save(&self, path: &Path) -> Result<(), PollError> {
        let wrap = |source| PollError::State {
            path: path.to_path_buf(),
            source,
        };
        let dir = path.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(wrap)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(wrap)?;
        let bytes = serde_json::to_vec_pretty(self).expect("poll state always serializes");
        tmp.write_all(&bytes).map_err(wrap)?;
        tmp.as_file().sync_all().map_err(wrap)?;
        tmp.persist(path).map_err(|e| wrap(e.error))?;
        if let Ok(d) = fs::File::open(dir) {
            let _ = d.sync_all();
        }
        Ok(())
    }

    pub fn last_seen(&self, code_id: &str) -> Option<&str> {
        self.revisions.get(code_id).map(String::as_str)
    }

    /// Records the new revisions carried by `events`.
    pub fn apply(&mut self, events: &[ChangeEvent]) {
        for e in events {
            self.revisions
                .insert(e.code_id.clone(), e.new_revision.clone());
        }
        if !events.is_empty() {
            self.updated_at = Some(Utc::now());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub code_id: String,
    pub old_revision: Option<String>,
    pub new_revision: String,
    pub detected_at: DateTime<Utc>,
}

impl ChangeEvent {
    pub fn payload(&self) -> JobPayload {
        JobPayload::TestRun {
            code_id: self.code_id.clone(),
            revision: self.new_revision.clone(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("probe {0}")]
    Failed(String),
    #[error("probe timed out")]
    TimedOut,
    #[error("probe printed no revision")]
    Empty,
    #[error("cannot run probe: {0}")]
    Spawn(String),
}

/// Source of a code's current revision.
pub trait RevisionProbe {
    fn probe(&self, code: &CodeSpec) -> Result<String, ProbeError>;
}

/// Runs the code's `revision_probe` command; the first non-empty line of its
/// output is the revision. `GEOFORGE_REPO_URL` and `GEOFORGE_CODE` are set.
#[derive(Debug, Clone)]
pub struct ShellProbe {
    pub cwd: PathBuf,
    pub timeout: Duration,
}

impl ShellProbe {
    pub fn new(cwd: impl Into<PathBuf>) -> Self {
        ShellProbe {
            cwd: cwd.into(),
            timeout: DEFAULT_PROBE_TIMEOUT,
        }
    }
}

impl RevisionProbe for ShellProbe {
    fn probe(&self, code: &CodeSpec) -> Result<String, ProbeError> {
        let env = BTreeMap::from([
            ("GEOFORGE_REPO_URL".to_string(), code.repo_url.clone()),
            ("GEOFORGE_CODE".to_string(), code.id.clone()),
        ]);
        let step = Step {
            command: &code.revision_probe,
            cwd: &self.cwd,
            env: &env,
            timeout: self.timeout,
        };
        let (outcome, output) =
            process::run_capture(&step).map_err(|e| ProbeError::Spawn(e.to_string()))?;
        match outcome {
            StepOutcome::TimedOut => Err(ProbeError::TimedOut),
            o if !o.success() => Err(ProbeError::Failed(format!("{o}: {}", output.trim()))),
            _ => output
                .lines()
                .map(str::trim)
                .find(|l| !l.is_empty())
                .map(str::to_string)
                .ok_or(ProbeError::Empty),
        }
    }
}

/// Fixed revisions, for tests and dry runs.
impl RevisionProbe for HashMap<String, Result<String, ProbeError>> {
    fn probe(&self, code: &CodeSpec) -> Result<String, ProbeError> {
        self.get(&code.id)
            .cloned()
            .unwrap_or_else(|| Err(ProbeError::Failed("no revision configured".into())))
    }
}

#[derive(Debug, Default)]
pub struct PollReport {
    pub events: Vec<ChangeEvent>,
    /// Codes whose probe failed, with the reason.
    pub failures: Vec<(String, ProbeError)>,
}

/// Probes every code once. Does not modify `state`; a failing probe only
/// produces an entry in `failures`.
pub fn poll_once(manifest: &Manifest, state: &PollState, probe: &dyn RevisionProbe) -> PollReport {
    let mut report = PollReport::default();
    for code in manifest.codes() {
        match probe.probe(code) {
            Ok(revision) => {
                let old = state.last_seen(&code.id);
                if old != Some(revision.as_str()) {
                    report.events.push(ChangeEvent {
                        code_id: code.id.clone(),
                        old_revision: old.map(str::to_string),
                        new_revision: revision,
                        detected_at: Utc::now(),
                    });
                }
            }
            Err(e) => {
                log::warn!("revision probe for {} failed: {e}", code.id);
                report.failures.push((code.id.clone(), e));
            }
        }
    }
    report
}

/// Enqueues one test run per event, in order. Stops at the first storage
/// error.
pub fn enqueue_changes<S: LogStore>(
    events: &[ChangeEvent],
    queue: &Queue<S>,
) -> Result<Vec<JobId>, QueueError> {
    events.iter().map(|e| queue.enqueue(e.payload())).collect()
}

#[derive(Debug, Default)]
pub struct CycleReport {
    pub jobs: Vec<JobId>,
    pub events: Vec<ChangeEvent>,
    pub failures: Vec<(String, ProbeError)>,
}

/// One full poll cycle: probe, enqueue, then persist state.
pub fn run_cycle<S: LogStore>(
    manifest: &Manifest,
    state_path: &Path,
    queue: &Queue<S>,
    probe: &dyn RevisionProbe,
) -> Result<CycleReport, PollError> {
    let mut state = PollState::load(state_path)?;
    let report = poll_once(manifest, &state, probe);
    let jobs = enqueue_changes(&report.events, queue)?;
    if !report.events.is_empty() {
        state.apply(&report.events);
        state.save(state_path)?;
    }
    Ok(CycleReport {
        jobs,
        events: report.events,
        failures: report.failures,
    })
}
