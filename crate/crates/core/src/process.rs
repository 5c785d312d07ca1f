//! Shell step execution with wall-clock timeouts.
//!
//! Every step runs as `sh -c <command>` in its own process group so that a
//! timeout can kill the step together with anything it spawned. Stdout and
//! stderr share one file handle, which keeps them interleaved in the order
//! the child wrote them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::Path;
use std::process::{Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

const POLL_INTERVAL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Exited(i32),
    Signaled(i32),
    TimedOut,
}

impl StepOutcome {
    pub fn success(self) -> bool {
        self == StepOutcome::Exited(0)
    }

    fn from_status(status: ExitStatus) -> Self {
        match (status.code(), status.signal()) {
            (Some(code), _) => StepOutcome::Exited(code),
            (None, Some(sig)) => StepOutcome::Signaled(sig),
            (None, None) => StepOutcome::Exited(-1),
        }
    }
}

impl std::fmt::Display for StepOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepOutcome::Exited(code) => write!(f, "exit {code}"),
            StepOutcome::Signaled(sig) => write!(f, "killed by signal {sig}"),
            StepOutcome::TimedOut => f.write_str("timed out"),
        }
    }
}

/// A single shell command invocation.
#[derive(Debug, Clone)]
pub struct Step<'a> {
    pub command: &'a str,
    pub cwd: &'a Path,
    pub env: &'a BTreeMap<String, String>,
    pub timeout: Duration,
}

fn kill_group(pid: u32) {
    // SAFETY: kill(2) with a negative pid signals the process group; no memory is touched.
    unsafe {
        libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
    }
}

/// Runs `step`, sending both output streams to `sink`.
pub fn run_step(step: &Step<'_>, sink: &File) -> io::Result<StepOutcome> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(step.command)
        .current_dir(step.cwd)
        .envs(step.env)
        .stdin(Stdio::null())
        .stdout(sink.try_clone()?)
        .stderr(sink.try_clone()?)
        .process_group(0)
        .spawn()?;
    let deadline = Instant::now() + step.timeout;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(StepOutcome::from_status(status));
        }
        if Instant::now() >= deadline {
            kill_group(child.id());
            child.wait()?;
            return Ok(StepOutcome::TimedOut);
        }
        thread::sleep(POLL_INTERVAL);
    }
}

/// Runs `step` and returns its outcome plus everything it printed.
pub fn run_capture(step: &Step<'_>) -> io::Result<(StepOutcome, String)> {
    let mut buf = tempfile::tempfile()?;
    let outcome = run_step(step, &buf)?;
    buf.seek(SeekFrom::Start(0))?;
    let mut bytes = Vec::new();
    buf.read_to_end(&mut bytes)?;
    Ok((outcome, String::from_utf8_lossy(&bytes).into_owned()))
}

/// Append-only step log with per-step timestamps.
pub struct StepLog {
    file: File,
}

impl StepLog {
    pub fn create(path: &Path) -> io::Result<Self> {
        let file = File::options().create(true).append(true).open(path)?;
        Ok(StepLog { file })
    }

    pub fn note(&mut self, message: &str) -> io::Result<()> {
        writeln!(
            self.file,
            "[{}] {}",
            chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ"),
            message
        )
    }

    pub fn write_raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.file.write_all(bytes)
    }

    /// Runs a step, framing its output with timestamped header and footer
    /// lines.
    pub fn run(&mut self, step: &Step<'_>) -> io::Result<StepOutcome> {
        self.note(&format!("$ {}", step.command))?;
        let started = Instant::now();
        let outcome = run_step(step, &self.file);
        match &outcome {
            Ok(o) => self.note(&format!(
                "{o} after {:.3}s",
                started.elapsed().as_secs_f64()
            ))?,
            Err(e) => self.note(&format!("failed to start: {e}"))?,
        }
        outcome
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step<'a>(cmd: &'a str, cwd: &'a Path, env: &'a BTreeMap<String, String>) -> Step<'a> {
        Step {
            command: cmd,
            cwd,
            env,
            timeout: Duration::from_secs(10),
        }
    }

    #[test]
    fn captures_interleaved_output_and_exit_code() {
        let dir = tempfile::tempdir().unwrap();
        let env = BTreeMap::from([("GREETING".to_string(), "hi".to_string())]);
        let (outcome, out) = run_capture(&step(
            "echo $GREETING; echo oops >&2; exit 3",
            dir.path(),
            &env,
        ))
        .unwrap();
        assert_eq!(outcome, StepOutcome::Exited(3));
        assert_eq!(out, "hi\noops\n");
    }

    #[test]
    fn timeout_kills_the_process_group() {
        let dir = tempfile::tempdir().unwrap();
        let env = BTreeMap::new();
        let marker = dir.path().join("late");
        let cmd = format!("(sleep 1; touch {}) & sleep 5", marker.display());
        let mut s = step(&cmd, dir.path(), &env);
        s.timeout = Duration::from_millis(200);
        let started = Instant::now();
        let (outcome, _) = run_capture(&s).unwrap();
        assert_eq!(outcome, StepOutcome::TimedOut);
        assert!(started.elapsed() < Duration::from_secs(3));
        thread::sleep(Duration::from_millis(1300));
        assert!(!marker.exists(), "background child survived the timeout");
    }

    #[test]
    fn step_log_frames_each_step() {
        let dir = tempfile::tempdir().unwrap();
        let env = BTreeMap::new();
        let path = dir.path().join("build.log");
        let mut log = StepLog::create(&path).unwrap();
        assert!(log
            .run(&step("echo one", dir.path(), &env))
            .unwrap()
            .success());
        assert!(!log.run(&step("false", dir.path(), &env)).unwrap().success());
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5, "{text}");
        assert!(lines[0].ends_with("$ echo one"));
        assert_eq!(lines[1], "one");
        assert!(lines[2].contains("exit 0 after"));
        assert!(lines[4].contains("exit 1 after"));
    }
}
