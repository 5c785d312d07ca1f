//! Durable FIFO job queue.
//!
//! The queue is an append-only log of events (`enqueue`, `claim`, `ack`,
//! `release`), one JSON object per line. Every append is flushed to stable
//! storage before the call returns and the in-memory state only changes after
//! a successful append, so a crash at any point leaves a log whose replay
//! reproduces every operation that returned `Ok`.
//!
//! A crash in the middle of an append leaves a torn last line without a
//! trailing newline. Replay drops such a tail; any other unparseable or
//! inconsistent line is reported as corruption.
//!
//! Jobs left `Claimed` by a crash go back to `Pending` through [`Queue::recover`],
//! which must run at process start before any claim.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type JobId = u64;

/// Claims allowed before an infrastructure failure becomes terminal.
pub const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("queue storage error: {0}")]
    Storage(#[from] io::Error),
    #[error("queue log corrupt at line {line}: {reason}: {record}")]
    Corrupt {
        line: usize,
        record: String,
        reason: String,
    },
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {id} is {status}, not claimed")]
    NotClaimed { id: JobId, status: JobStatus },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum JobPayload {
    TestRun { code_id: String, revision: String },
}

impl fmt::Display for JobPayload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JobPayload::TestRun { code_id, revision } => write!(f, "test-run {code_id}@{revision}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: JobId,
    pub payload: JobPayload,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Claimed,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobStatus::Pending => "pending",
            JobStatus::Claimed => "claimed",
            JobStatus::Done => "done",
            JobStatus::Failed => "failed",
        })
    }
}

/// Terminal outcome passed to [`Queue::acknowledge`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Done,
    Failed,
}

impl From<Outcome> for JobStatus {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::Done => JobStatus::Done,
            Outcome::Failed => JobStatus::Failed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job: Job,
    pub status: JobStatus,
    pub attempts: u32,
    pub claimed_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum Event {
    Enqueue {
        job: Job,
    },
    Claim {
        id: JobId,
        at: DateTime<Utc>,
    },
    Ack {
        id: JobId,
        outcome: Outcome,
    },
    Release {
        id: JobId,
    },
    /// Written by compaction: the id counter and a surviving record.
    Sequence {
        next_id: JobId,
    },
    Restore {
        record: JobRecord,
    },
}

/// Byte storage behind the queue log.
pub trait LogStore: Send {
    fn read_all(&mut self) -> io::Result<Vec<u8>>;
    /// Appends `bytes`; they must be durable when this returns `Ok`. On
    /// error the store may hold a prefix of `bytes`.
    fn append(&mut self, bytes: &[u8]) -> io::Result<()>;
    /// Discards everything past `len`.
    fn truncate(&mut self, len: u64) -> io::Result<()>;
    /// Atomically replaces the whole content.
    fn replace(&mut self, bytes: &[u8]) -> io::Result<()>;
}

/// A log file on disk.
pub struct FileStore {
    path: PathBuf,
    file: File,
    writable: bool,
}

impl FileStore {
    pub fn open(path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = File::options()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        Ok(FileStore {
            path: path.to_path_buf(),
            file,
            writable: true,
        })
    }

    /// Opens for inspection only; every write fails with `PermissionDenied`.
    pub fn open_read_only(path: &Path) -> io::Result<Self> {
        let file = File::open(path)?;
        Ok(FileStore {
            path: path.to_path_buf(),
            file,
            writable: false,
        })
    }

    fn check_writable(&self) -> io::Result<()> {
        if self.writable {
            Ok(())
        } else {
            Err(io::Error::new(
                io::ErrorKind::PermissionDenied,
                format!("{} opened read-only", self.path.display()),
            ))
        }
    }
}

impl LogStore for FileStore {
    fn read_all(&mut self) -> io::Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.file.seek(SeekFrom::Start(0))?;
        self.file.read_to_end(&mut buf)?;
        Ok(buf)
    }

    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.check_writable()?;
        self.file.write_all(bytes)?;
        self.file.sync_data()
    }

    fn truncate(&mut self, len: u64) -> io::Result<()> {
        self.check_writable()?;
        self.file.set_len(len)?;
        self.file.sync_data()
    }

    fn replace(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.check_writable()?;
        let dir = self.path.parent().unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(&self.path).map_err(|e| e.error)?;
        File::open(dir)?.sync_all()?;
        self.file = File::options().read(true).append(true).open(&self.path)?;
        Ok(())
    }
}

/// Fault to apply to the next append of a [`MemoryStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Fail without writing anything.
    Reject,
    /// Write only the first `n` bytes, then fail, as a crash mid-write would.
    Tear(usize),
}

#[derive(Debug, Default)]
struct MemoryDisk {
    bytes: Vec<u8>,
    read_only: bool,
    fault: Option<Fault>,
}

/// In-memory log store. Clones share the same bytes, so a store outlives the
/// queue that used it the way a file outlives a crashed process.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    disk: Arc<Mutex<MemoryDisk>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn disk(&self) -> MutexGuard<'_, MemoryDisk> {
        self.disk.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn set_read_only(&self, read_only: bool) {
        self.disk().read_only = read_only;
    }

    /// Arms a one-shot fault for the next append.
    pub fn inject_fault(&self, fault: Fault) {
        self.disk().fault = Some(fault);
    }

    pub fn contents(&self) -> Vec<u8> {
        self.disk().bytes.clone()
    }
}

impl LogStore for MemoryStore {
    fn read_all(&mut self) -> io::Result<Vec<u8>> {
        Ok(self.contents())
    }

    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        let mut disk = self.disk();
        if disk.read_only {
            return Err(io::Error::new(
                io::ErrorKind::PermissionDenied,
                "read-only store",
            ));
        }
        match disk.fault.take() {
            None => {
                disk.bytes.extend_from_slice(bytes);
                Ok(())
            }
            Some(Fault::Reject) => Err(io::Error::other("injected write failure")),
            Some(Fault::Tear(n)) => {
                disk.bytes.extend_from_slice(&bytes[..n.min(bytes.len())]);
                Err(io::Error::other("injected torn write"))
            }
        }
    }

    fn truncate(&mut self, len: u64) -> io::Result<()> {
        let mut disk = self.disk();
        if disk.read_only {
            return Err(io::Error::new(
                io::ErrorKind::PermissionDenied,
                "read-only store",
            ));
        }
        disk.bytes.truncate(len as usize);
        Ok(())
    }

    fn replace(&mut self, bytes: &[u8]) -> io::Result<()> {
        let mut disk = self.disk();
        if disk.read_only {
            return Err(io::Error::new(
                io::ErrorKind::PermissionDenied,
                "read-only store",
            ));
        }
        disk.bytes = bytes.to_vec();
        Ok(())
    }
}

#[derive(Debug, Default)]
struct State {
    records: BTreeMap<JobId, JobRecord>,
    next_id: JobId,
}

impl State {
    fn apply(&mut self, event: &Event) -> Result<(), String> {
        match event {
            Event::Enqueue { job } => {
                if job.id < self.next_id.max(1) {
                    return Err(format!("job id {} reused", job.id));
                }
                self.next_id = job.id + 1;
                self.records.insert(
                    job.id,
                    JobRecord {
                        job: job.clone(),
                        status: JobStatus::Pending,
                        attempts: 0,
                        claimed_at: None,
                    },
                );
            }
            Event::Claim { id, at } => {
                let rec = self.expect(*id, JobStatus::Pending)?;
                rec.status = JobStatus::Claimed;
                rec.attempts += 1;
                rec.claimed_at = Some(*at);
            }
            Event::Ack { id, outcome } => {
                let rec = self.expect(*id, JobStatus::Claimed)?;
                rec.status = (*outcome).into();
            }
            Event::Release { id } => {
                let rec = self.expect(*id, JobStatus::Claimed)?;
                rec.status = JobStatus::Pending;
                rec.claimed_at = None;
            }
            Event::Sequence { next_id } => self.next_id = self.next_id.max(*next_id),
            Event::Restore { record } => {
                let id = record.job.id;
                if self.records.contains_key(&id) {
                    return Err(format!("job {id} restored twice"));
                }
                self.next_id = self.next_id.max(id + 1);
                self.records.insert(id, record.clone());
            }
        }
        Ok(())
    }

    fn expect(&mut self, id: JobId, status: JobStatus) -> Result<&mut JobRecord, String> {
        let rec = self
            .records
            .get_mut(&id)
            .ok_or_else(|| format!("event for unknown job {id}"))?;
        if rec.status != status {
            return Err(format!("job {id} is {} but expected {status}", rec.status));
        }
        Ok(rec)
    }
}

struct Inner<S> {
    store: S,
    state: State,
    /// Length of the log known to end on a record boundary.
    len: u64,
}

impl<S: LogStore> Inner<S> {
    /// Persists `event`, then applies it. Callers check that the event is
    /// legal in the current state.
    fn commit(&mut self, event: Event) -> Result<(), QueueError> {
        let mut line = serde_json::to_vec(&event).expect("queue events always serialize");
        line.push(b'\n');
        if let Err(e) = self.store.append(&line) {
            // Drop any partial line so later appends start on a clean boundary.
            let _ = self.store.truncate(self.len);
            return Err(e.into());
        }
        self.len += line.len() as u64;
        self.state
            .apply(&event)
            .expect("caller validated the transition");
        Ok(())
    }
}

/// Replays a log, returning the state and the length of the valid prefix.
fn replay(bytes: &[u8]) -> Result<(State, u64), QueueError> {
    let mut state = State {
        records: BTreeMap::new(),
        next_id: 1,
    };
    let mut offset = 0usize;
    for (idx, chunk) in bytes.split_inclusive(|b| *b == b'\n').enumerate() {
        let line = idx + 1;
        if !chunk.ends_with(b"\n") {
            // Torn tail from an interrupted append.
            break;
        }
        let text = &chunk[..chunk.len() - 1];
        offset += chunk.len();
        if text.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let corrupt = |reason: String| QueueError::Corrupt {
            line,
            record: String::from_utf8_lossy(text).into_owned(),
            reason,
        };
        let event: Event = serde_json::from_slice(text).map_err(|e| corrupt(e.to_string()))?;
        state.apply(&event).map_err(corrupt)?;
    }
    Ok((state, offset as u64))
}

/// The job queue. All operations are serialized through one internal lock,
/// so a queue can be shared between worker threads.
pub struct Queue<S: LogStore = FileStore> {
    inner: Mutex<Inner<S>>,
}

impl Queue<FileStore> {
    pub fn open_path(path: &Path) -> Result<Self, QueueError> {
        Queue::open(FileStore::open(path)?)
    }

    pub fn open_path_read_only(path: &Path) -> Result<Self, QueueError> {
        Queue::open(FileStore::open_read_only(path)?)
    }
}

impl<S: LogStore> Queue<S> {
    /// Replays the log. A torn final line is discarded (and truncated away
    /// when the store is writable).
    pub fn open(mut store: S) -> Result<Self, QueueError> {
        let bytes = store.read_all()?;
        let (state, valid) = replay(&bytes)?;
        if valid < bytes.len() as u64 {
            log::warn!(
                "queue log: dropping {} bytes of an interrupted write",
                bytes.len() as u64 - valid
            );
            if let Err(e) = store.truncate(valid) {
                log::debug!("queue log not truncated: {e}");
            }
        }
        Ok(Queue {
            inner: Mutex::new(Inner {
                store,
                state,
                len: valid,
            }),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner<S>> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Durably appends a new Pending job and returns its id.
    pub fn enqueue(&self, payload: JobPayload) -> Result<JobId, QueueError> {
        let mut inner = self.lock();
        let id = inner.state.next_id.max(1);
        let job = Job {
            id,
            payload,
            created_at: Utc::now(),
        };
        inner.commit(Event::Enqueue { job })?;
        Ok(id)
    }

    /// Claims the oldest Pending job.
    pub fn claim(&self) -> Result<Option<JobRecord>, QueueError> {
        let mut inner = self.lock();
        let Some(id) = inner
            .state
            .records
            .values()
            .find(|r| r.status == JobStatus::Pending)
            .map(|r| r.job.id)
        else {
            return Ok(None);
        };
        inner.commit(Event::Claim { id, at: Utc::now() })?;
        Ok(inner.state.records.get(&id).cloned())
    }

    /// Records a terminal outcome for a Claimed job.
    pub fn acknowledge(&self, id: JobId, outcome: Outcome) -> Result<(), QueueError> {
        let mut inner = self.lock();
        Self::require_claimed(&inner.state, id)?;
        inner.commit(Event::Ack { id, outcome })
    }

    /// Hands a Claimed job back after an infrastructure failure. It becomes
    /// Pending again unless it has used up [`MAX_ATTEMPTS`], in which case
    /// it is marked Failed. Returns the resulting status.
    pub fn release_for_retry(&self, id: JobId) -> Result<JobStatus, QueueError> {
        let mut inner = self.lock();
        let attempts = Self::require_claimed(&inner.state, id)?.attempts;
        if attempts >= MAX_ATTEMPTS {
            inner.commit(Event::Ack {
                id,
                outcome: Outcome::Failed,
            })?;
            Ok(JobStatus::Failed)
        } else {
            inner.commit(Event::Release { id })?;
            Ok(JobStatus::Pending)
        }
    }

    fn require_claimed(state: &State, id: JobId) -> Result<&JobRecord, QueueError> {
        let rec = state.records.get(&id).ok_or(QueueError::UnknownJob(id))?;
        if rec.status != JobStatus::Claimed {
            return Err(QueueError::NotClaimed {
                id,
                status: rec.status,
            });
        }
        Ok(rec)
    }

    /// Returns every Claimed job to Pending. Call once at startup.
    pub fn recover(&self) -> Result<usize, QueueError> {
        let mut inner = self.lock();
        let orphans: Vec<JobId> = inner
            .state
            .records
            .values()
            .filter(|r| r.status == JobStatus::Claimed)
            .map(|r| r.job.id)
            .collect();
        for &id in &orphans {
            inner.commit(Event::Release { id })?;
        }
        Ok(orphans.len())
    }

    /// Rewrites the log keeping only non-terminal records. Returns the
    /// number of records dropped.
    pub fn compact(&self) -> Result<usize, QueueError> {
        let mut inner = self.lock();
        let mut out = Vec::new();
        let mut push = |e: &Event| {
            out.extend(serde_json::to_vec(e).expect("queue events always serialize"));
            out.push(b'\n');
        };
        push(&Event::Sequence {
            next_id: inner.state.next_id,
        });
        let mut dropped = 0;
        for rec in inner.state.records.values() {
            if rec.status.is_terminal() {
                dropped += 1;
            } else {
                push(&Event::Restore {
                    record: rec.clone(),
                });
            }
        }
        inner.store.replace(&out)?;
        inner.len = out.len() as u64;
        inner.state.records.retain(|_, r| !r.status.is_terminal());
        Ok(dropped)
    }

    pub fn get(&self, id: JobId) -> Option<JobRecord> {
        self.lock().state.records.get(&id).cloned()
    }

    /// All known records in id order.
    pub fn records(&self) -> Vec<JobRecord> {
        self.lock().state.records.values().cloned().collect()
    }

    pub fn pending_count(&self) -> usize {
        self.lock()
            .state
            .records
            .values()
            .filter(|r| r.status == JobStatus::Pending)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(code: &str) -> JobPayload {
        JobPayload::TestRun {
            code_id: code.into(),
            revision: "r1".into(),
        }
    }

    #[test]
    fn enqueue_assigns_increasing_ids_and_claims_fifo() {
        let q = Queue::open(MemoryStore::new()).unwrap();
        assert_eq!(q.enqueue(payload("a")).unwrap(), 1);
        assert_eq!(q.get(1).unwrap().status, JobStatus::Pending);
        assert_eq!(q.enqueue(payload("b")).unwrap(), 2);

        let first = q.claim().unwrap().unwrap();
        assert_eq!(first.job.id, 1);
        assert_eq!(first.status, JobStatus::Claimed);
        assert_eq!(first.attempts, 1);
        assert!(first.claimed_at.is_some());
        assert_eq!(q.claim().unwrap().unwrap().job.id, 2);
        assert!(q.claim().unwrap().is_none());
    }

    #[test]
    fn empty_queue_claims_nothing() {
        let q = Queue::open(MemoryStore::new()).unwrap();
        assert!(q.claim().unwrap().is_none());
    }

    #[test]
    fn acknowledge_is_terminal() {
        let q = Queue::open(MemoryStore::new()).unwrap();
        q.enqueue(payload("a")).unwrap();
        q.claim().unwrap();
        q.acknowledge(1, Outcome::Done).unwrap();
        assert_eq!(q.get(1).unwrap().status, JobStatus::Done);
        assert!(matches!(
            q.acknowledge(1, Outcome::Done),
            Err(QueueError::NotClaimed {
                id: 1,
                status: JobStatus::Done
            })
        ));
        assert!(matches!(
            q.acknowledge(99, Outcome::Done),
            Err(QueueError::UnknownJob(99))
        ));
    }

    #[test]
    fn ack_requires_claim() {
        let q = Queue::open(MemoryStore::new()).unwrap();
        q.enqueue(payload("a")).unwrap();
        assert!(matches!(
            q.acknowledge(1, Outcome::Failed),
            Err(QueueError::NotClaimed { .. })
        ));
    }

    #[test]
    fn recover_requeues_only_claimed() {
        let store = MemoryStore::new();
        {
            let q = Queue::open(store.clone()).unwrap();
            q.enqueue(payload("a")).unwrap();
            q.enqueue(payload("b")).unwrap();
            q.claim().unwrap();
            q.acknowledge(1, Outcome::Done).unwrap();
            q.claim().unwrap();
        }
        let q = Queue::open(store.clone()).unwrap();
        assert_eq!(q.recover().unwrap(), 1);
        assert_eq!(q.get(1).unwrap().status, JobStatus::Done);
        assert_eq!(q.get(2).unwrap().status, JobStatus::Pending);
        assert_eq!(q.recover().unwrap(), 0);
        assert_eq!(q.claim().unwrap().unwrap().attempts, 2);
    }

    #[test]
    fn read_only_store_rejects_enqueue_without_state_change() {
        let store = MemoryStore::new();
        let q = Queue::open(store.clone()).unwrap();
        q.enqueue(payload("a")).unwrap();
        store.set_read_only(true);
        assert!(matches!(
            q.enqueue(payload("b")),
            Err(QueueError::Storage(_))
        ));
        assert_eq!(q.records().len(), 1);
        store.set_read_only(false);
        assert_eq!(q.enqueue(payload("b")).unwrap(), 2);
    }

    #[test]
    fn torn_append_is_rolled_back_and_tail_dropped_on_replay() {
        let store = MemoryStore::new();
        let q = Queue::open(store.clone()).unwrap();
        q.enqueue(payload("a")).unwrap();
        let clean = store.contents();
        store.inject_fault(Fault::Tear(10));
        assert!(q.enqueue(payload("b")).is_err());
        assert_eq!(store.contents(), clean);
        assert_eq!(q.enqueue(payload("c")).unwrap(), 2);

        // A torn tail left by a crash (no rollback) is ignored on replay.
        let mut crashed = store.contents();
        crashed.extend_from_slice(br#"{"op":"claim","id":1"#);
        let survivor = MemoryStore::new();
        survivor.clone().replace(&crashed).unwrap();
        let q = Queue::open(survivor.clone()).unwrap();
        assert_eq!(q.records().len(), 2);
        assert_eq!(survivor.contents(), store.contents());
    }

    #[test]
    fn corrupt_record_is_reported_with_line() {
        let store = MemoryStore::new();
        let q = Queue::open(store.clone()).unwrap();
        q.enqueue(payload("a")).unwrap();
        let mut bytes = store.contents();
        bytes.extend_from_slice(b"{\"op\":\"ack\",\"id\":7,\"outcome\":\"done\"}\n");
        let bad = MemoryStore::new();
        bad.clone().replace(&bytes).unwrap();
        match Queue::open(bad) {
            Err(QueueError::Corrupt { line, record, .. }) => {
                assert_eq!(line, 2);
                assert!(record.contains("\"id\":7"));
            }
            other => panic!("expected corruption, got {:?}", other.err()),
        }
    }

    #[test]
    fn compaction_keeps_live_jobs_and_id_sequence() {
        let store = MemoryStore::new();
        let q = Queue::open(store.clone()).unwrap();
        for c in ["a", "b", "c"] {
            q.enqueue(payload(c)).unwrap();
        }
        q.claim().unwrap();
        q.acknowledge(1, Outcome::Done).unwrap();
        q.claim().unwrap();
        assert_eq!(q.compact().unwrap(), 1);
        drop(q);

        let q = Queue::open(store.clone()).unwrap();
        let recs = q.records();
        assert_eq!(
            recs.iter().map(|r| r.job.id).collect::<Vec<_>>(),
            vec![2, 3]
        );
        assert_eq!(recs[0].status, JobStatus::Claimed);
        assert_eq!(q.recover().unwrap(), 1);
        assert_eq!(q.enqueue(payload("d")).unwrap(), 4);

        // Ids are not reused even when compaction drops every record.
        for _ in 0..3 {
            let r = q.claim().unwrap().unwrap();
            q.acknowledge(r.job.id, Outcome::Done).unwrap();
        }
        q.compact().unwrap();
        drop(q);
        let q = Queue::open(store).unwrap();
        assert!(q.records().is_empty());
        assert_eq!(q.enqueue(payload("e")).unwrap(), 5);
    }

    #[test]
    fn retry_policy_caps_attempts() {
        let q = Queue::open(MemoryStore::new()).unwrap();
        q.enqueue(payload("a")).unwrap();
        for attempt in 1..=MAX_ATTEMPTS {
            let r = q.claim().unwrap().unwrap();
            assert_eq!(r.attempts, attempt);
            let status = q.release_for_retry(1).unwrap();
            if attempt < MAX_ATTEMPTS {
                assert_eq!(status, JobStatus::Pending);
            } else {
                assert_eq!(status, JobStatus::Failed);
            }
        }
        assert!(q.claim().unwrap().is_none());
    }

    #[test]
    fn file_store_survives_reopen_and_read_only_view() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queue.log");
        {
            let q = Queue::open_path(&path).unwrap();
            q.enqueue(payload("a")).unwrap();
            q.enqueue(payload("b")).unwrap();
            q.claim().unwrap();
        }
        let ro = Queue::open_path_read_only(&path).unwrap();
        assert_eq!(ro.records().len(), 2);
        assert!(matches!(
            ro.enqueue(payload("c")),
            Err(QueueError::Storage(_))
        ));
        assert_eq!(ro.records().len(), 2);

        let q = Queue::open_path(&path).unwrap();
        assert_eq!(q.recover().unwrap(), 1);
        q.compact().unwrap();
        let q = Queue::open_path(&path).unwrap();
        assert_eq!(q.pending_count(), 2);
    }
}
