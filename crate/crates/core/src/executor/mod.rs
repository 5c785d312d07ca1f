//! Runs test plans: one cell per (code, platform) unit, each with a build
//! phase (libraries, then build steps) gating a test phase (run steps, then
//! output comparison against golden references).
//!
//! Unit working directories live at
//! `<data>/<workdir_root>/<code>/<revision>/<platform>/` and are recreated
//! empty for every run. Each phase writes a plain-text log there
//! (`build.log`, `test.log`).

mod cache;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use cache::{CacheKey, CachedLibrary, LibraryCache, LibraryError};

use crate::compare::{self, ComparisonResult};
use crate::manifest::{PlanUnit, TestPlan, TestSpec};
use crate::process::{Step, StepLog, StepOutcome};
use crate::template::{self, Vars};

pub const BUILD_LOG: &str = "build.log";
pub const TEST_LOG: &str = "test.log";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildStatus {
    Succeeded,
    Failed,
    TimedOut,
}

/// Where a build phase stopped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailedStep {
    /// The working directory could not be prepared.
    Setup,
    /// Preparing the named library failed.
    Library(String),
    /// 1-based index into the code's build steps.
    Command(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildResult {
    pub status: BuildStatus,
    pub log: String,
    pub duration_s: f64,
    /// Present iff `status` is not `Succeeded`.
    pub failed_step: Option<FailedStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStatus {
    Passed,
    Failed,
    TimedOut,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestOutcome {
    Compared(ComparisonResult),
    Error(String),
}

impl TestOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, TestOutcome::Compared(c) if c.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCaseResult {
    pub test_id: String,
    pub outcome: TestOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub status: TestStatus,
    pub per_test: Vec<TestCaseResult>,
    pub log: String,
    pub duration_s: f64,
}

impl TestResult {
    fn skipped() -> Self {
        TestResult {
            status: TestStatus::Skipped,
            per_test: Vec::new(),
            log: String::new(),
            duration_s: 0.0,
        }
    }
}

/// Outcome of one (code, platform) unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub code_id: String,
    pub platform_id: String,
    pub revision: String,
    pub build: BuildResult,
    pub test: TestResult,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub workdir: PathBuf,
}

impl CellResult {
    pub fn is_green(&self) -> bool {
        self.build.status == BuildStatus::Succeeded && self.test.status == TestStatus::Passed
    }

    pub fn build_log_path(&self) -> PathBuf {
        self.workdir.join(BUILD_LOG)
    }

    pub fn test_log_path(&self) -> PathBuf {
        self.workdir.join(TEST_LOG)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Library,
    Build,
    Test,
}

/// One executed shell command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub kind: CommandKind,
    /// Absent for library builds, which are shared between codes.
    pub code_id: Option<String>,
    pub platform_id: String,
    /// Library id, code id or test id.
    pub subject: String,
    pub command: String,
}

/// Record of every command the executor has run.
#[derive(Debug, Default)]
pub struct CommandLog {
    records: Mutex<Vec<CommandRecord>>,
}

impl CommandLog {
    pub fn record(&self, record: CommandRecord) {
        self.records
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(record);
    }

    pub fn count(&self, kind: CommandKind) -> usize {
        self.count_where(|r| r.kind == kind)
    }

    pub fn count_where(&self, pred: impl Fn(&CommandRecord) -> bool) -> usize {
        self.records
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .filter(|r| pred(r))
            .count()
    }

    pub fn snapshot(&self) -> Vec<CommandRecord> {
        self.records
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }
}

/// Progress notifications from [`Executor::run_plan_observed`].
#[derive(Debug)]
pub enum PlanEvent<'a> {
    Started { index: usize, unit: &'a PlanUnit },
    Finished { index: usize, cell: &'a CellResult },
}

/// Replaces characters that are unsafe in a path component.
pub fn path_component(raw: &str) -> String {
    let cleaned: String = raw
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    match cleaned.as_str() {
        "" | "." | ".." => "_".repeat(cleaned.len().max(1)),
        _ => cleaned,
    }
}

pub struct Executor {
    data_dir: PathBuf,
    cache: LibraryCache,
    commands: CommandLog,
}

impl Executor {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        let data_dir = data_dir.into();
        Executor {
            cache: LibraryCache::new(data_dir.join("libcache")),
            data_dir,
            commands: CommandLog::default(),
        }
    }

    pub fn cache(&self) -> &LibraryCache {
        &self.cache
    }

    pub fn commands(&self) -> &CommandLog {
        &self.commands
    }

    pub fn unit_workdir(&self, unit: &PlanUnit) -> PathBuf {
        self.data_dir
            .join(&unit.platform.workdir_root)
            .join(&unit.code_id)
            .join(path_component(&unit.revision))
            .join(&unit.platform.id)
    }

    fn unit_env(&self, unit: &PlanUnit) -> BTreeMap<String, String> {
        let mut env = unit.platform.env.clone();
        env.insert("GEOFORGE_CODE".into(), unit.code_id.clone());
        env.insert("GEOFORGE_PLATFORM".into(), unit.platform.id.clone());
        env.insert("GEOFORGE_REVISION".into(), unit.revision.clone());
        for lib in &unit.libraries {
            let dir = self.cache.install_dir(&CacheKey::new(lib, &unit.platform));
            let name = format!(
                "GEOFORGE_LIB_{}",
                lib.id
                    .to_ascii_uppercase()
                    .replace(|c: char| !c.is_ascii_alphanumeric(), "_")
            );
            env.insert(name, dir.display().to_string());
        }
        env
    }

    /// `{libdir}` for code steps: the unit's library install directories in
    /// declaration order, `:`-separated.
    fn unit_libdir(&self, unit: &PlanUnit) -> String {
        unit.libraries
            .iter()
            .map(|l| {
                self.cache
                    .install_dir(&CacheKey::new(l, &unit.platform))
                    .display()
                    .to_string()
            })
            .collect::<Vec<_>>()
            .join(":")
    }

    fn unit_vars(&self, unit: &PlanUnit, workdir: &Path) -> Vars {
        Vars {
            workdir: Some(workdir.display().to_string()),
            libdir: Some(self.unit_libdir(unit)),
            revision: Some(unit.revision.clone()),
            output: None,
        }
    }

    /// Cached build of one library for one platform.
    pub fn prepare_library(
        &self,
        lib: &crate::manifest::LibrarySpec,
        platform: &crate::manifest::PlatformSpec,
        timeout: Duration,
    ) -> Result<CachedLibrary, LibraryError> {
        let mut env = platform.env.clone();
        env.insert("GEOFORGE_PLATFORM".into(), platform.id.clone());
        self.cache
            .prepare(lib, platform, &env, timeout, &self.commands)
    }

    /// Prepares libraries, then runs the build steps in order, stopping at
    /// the first failure. `workdir` must exist.
    pub fn run_build_phase(&self, unit: &PlanUnit, workdir: &Path) -> BuildResult {
        let started = Instant::now();
        let deadline = started + Duration::from_secs(unit.timeout_build_s);
        let log_path = workdir.join(BUILD_LOG);
        let finish = |status, failed_step| BuildResult {
            status,
            log: fs::read_to_string(&log_path).unwrap_or_default(),
            duration_s: started.elapsed().as_secs_f64(),
            failed_step,
        };
        let mut log = match StepLog::create(&log_path) {
            Ok(l) => l,
            Err(e) => {
                log::error!("cannot create {}: {e}", log_path.display());
                return finish(BuildStatus::Failed, Some(FailedStep::Setup));
            }
        };

        for lib in &unit.libraries {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let _ = log.note(&format!("library {} {}", lib.id, lib.version));
            match self.prepare_library(lib, &unit.platform, remaining) {
                Ok(entry) => {
                    let _ = log.note(&format!("using {}", entry.install_dir.display()));
                }
                Err(e) => {
                    let _ = log.note(&e.to_string());
                    let _ = log.note("library build log follows");
                    let _ = log.write_raw(e.log().as_bytes());
                    let status = if e.is_timeout() {
                        BuildStatus::TimedOut
                    } else {
                        BuildStatus::Failed
                    };
                    return finish(status, Some(FailedStep::Library(lib.id.clone())));
                }
            }
        }

        let env = self.unit_env(unit);
        let vars = self.unit_vars(unit, workdir);
        for (i, raw) in unit.build_steps.iter().enumerate() {
            let step_no = i + 1;
            let command = match template::expand(raw, &vars) {
                Ok(c) => c,
                Err(e) => {
                    let _ = log.note(&format!("step {step_no}: {e}"));
                    return finish(BuildStatus::Failed, Some(FailedStep::Command(step_no)));
                }
            };
            self.commands.record(CommandRecord {
                kind: CommandKind::Build,
                code_id: Some(unit.code_id.clone()),
                platform_id: unit.platform.id.clone(),
                subject: unit.code_id.clone(),
                command: command.clone(),
            });
            let outcome = log.run(&Step {
                command: &command,
                cwd: workdir,
                env: &env,
                timeout: deadline.saturating_duration_since(Instant::now()),
            });
            match outcome {
                Ok(StepOutcome::Exited(0)) => {}
                Ok(StepOutcome::TimedOut) => {
                    return finish(BuildStatus::TimedOut, Some(FailedStep::Command(step_no)))
                }
                Ok(_) | Err(_) => {
                    return finish(BuildStatus::Failed, Some(FailedStep::Command(step_no)))
                }
            }
        }
        finish(BuildStatus::Succeeded, None)
    }

    /// Runs every test and compares its output with the golden reference.
    /// Nothing runs unless `build` succeeded.
    pub fn run_test_phase(
        &self,
        unit: &PlanUnit,
        workdir: &Path,
        build: &BuildResult,
    ) -> TestResult {
        if build.status != BuildStatus::Succeeded {
            return TestResult::skipped();
        }
        let started = Instant::now();
        let deadline = started + Duration::from_secs(unit.timeout_test_s);
        let log_path = workdir.join(TEST_LOG);
        let mut per_test = Vec::with_capacity(unit.tests.len());
        let mut timed_out = false;
        match StepLog::create(&log_path) {
            Ok(mut log) => {
                let env = self.unit_env(unit);
                for test in &unit.tests {
                    let outcome = if timed_out {
                        TestOutcome::Error("not run: test phase timed out".into())
                    } else {
                        let _ = log.note(&format!("test {}", test.id));
                        let (outcome, hit_timeout) =
                            self.run_one_test(unit, test, workdir, &env, deadline, &mut log);
                        timed_out |= hit_timeout;
                        if let TestOutcome::Error(e) = &outcome {
                            let _ = log.note(&format!("test {}: {e}", test.id));
                        }
                        outcome
                    };
                    per_test.push(TestCaseResult {
                        test_id: test.id.clone(),
                        outcome,
                    });
                }
            }
            Err(e) => {
                for test in &unit.tests {
                    per_test.push(TestCaseResult {
                        test_id: test.id.clone(),
                        outcome: TestOutcome::Error(format!("cannot create test log: {e}")),
                    });
                }
            }
        }
        let status = if timed_out {
            TestStatus::TimedOut
        } else if per_test.iter().all(|t| t.outcome.passed()) {
            TestStatus::Passed
        } else {
            TestStatus::Failed
        };
        TestResult {
            status,
            per_test,
            log: fs::read_to_string(&log_path).unwrap_or_default(),
            duration_s: started.elapsed().as_secs_f64(),
        }
    }

    /// Returns the outcome and whether the phase deadline was hit.
    fn run_one_test(
        &self,
        unit: &PlanUnit,
        test: &TestSpec,
        workdir: &Path,
        env: &BTreeMap<String, String>,
        deadline: Instant,
        log: &mut StepLog,
    ) -> (TestOutcome, bool) {
        let output = workdir.join(&test.output_path);
        let mut vars = self.unit_vars(unit, workdir);
        vars.output = Some(output.display().to_string());
        if let Some(parent) = output.parent() {
            let _ = fs::create_dir_all(parent);
        }
        for (i, raw) in test.run_steps.iter().enumerate() {
            let step_no = i + 1;
            let command = match template::expand(raw, &vars) {
                Ok(c) => c,
                Err(e) => return (TestOutcome::Error(format!("step {step_no}: {e}")), false),
            };
            self.commands.record(CommandRecord {
                kind: CommandKind::Test,
                code_id: Some(unit.code_id.clone()),
                platform_id: unit.platform.id.clone(),
                subject: test.id.clone(),
                command: command.clone(),
            });
            let outcome = log.run(&Step {
                command: &command,
                cwd: workdir,
                env,
                timeout: deadline.saturating_duration_since(Instant::now()),
            });
            match outcome {
                Ok(StepOutcome::Exited(0)) => {}
                Ok(StepOutcome::TimedOut) => {
                    return (
                        TestOutcome::Error(format!("step {step_no} timed out")),
                        true,
                    )
                }
                Ok(o) => return (TestOutcome::Error(format!("step {step_no}: {o}")), false),
                Err(e) => {
                    return (
                        TestOutcome::Error(format!("step {step_no} did not start: {e}")),
                        false,
                    )
                }
            }
        }
        if !output.is_file() {
            return (
                TestOutcome::Error(format!("output missing: {}", test.output_path.display())),
                false,
            );
        }
        let outcome = (|| {
            let golden = compare::parse_timeseries(&test.golden_path)
                .map_err(|e| format!("golden reference: {e}"))?;
            let candidate =
                compare::parse_timeseries(&output).map_err(|e| format!("output: {e}"))?;
            let result = compare::compare(test.comparator, &golden, &candidate, test.threshold)
                .map_err(|e| format!("comparator: {e}"))?;
            if let Some(profile) = &result.profile {
                let path = workdir.join(format!("{}.profile.tsv", test.id));
                let written = fs::File::create(&path)
                    .and_then(|mut f| compare::write_profile(&mut f, golden.times(), profile));
                if let Err(e) = written {
                    log::warn!("cannot write {}: {e}", path.display());
                }
            }
            let _ = log.note(&format!(
                "{} statistic {} vs threshold {}: {}",
                result.metric,
                result.statistic,
                result.threshold,
                if result.passed { "pass" } else { "FAIL" }
            ));
            Ok::<_, String>(result)
        })();
        (
            match outcome {
                Ok(r) => TestOutcome::Compared(r),
                Err(e) => TestOutcome::Error(e),
            },
            false,
        )
    }

    /// Runs one unit in a fresh working directory.
    pub fn run_unit(&self, unit: &PlanUnit) -> CellResult {
        let started_at = Utc::now();
        let workdir = self.unit_workdir(unit);
        let fresh = (|| {
            if workdir.exists() {
                fs::remove_dir_all(&workdir)?;
            }
            fs::create_dir_all(&workdir)
        })();
        let build = match fresh {
            Ok(()) => self.run_build_phase(unit, &workdir),
            Err(e) => BuildResult {
                status: BuildStatus::Failed,
                log: format!("cannot prepare {}: {e}\n", workdir.display()),
                duration_s: 0.0,
                failed_step: Some(FailedStep::Setup),
            },
        };
        let test = self.run_test_phase(unit, &workdir, &build);
        CellResult {
            code_id: unit.code_id.clone(),
            platform_id: unit.platform.id.clone(),
            revision: unit.revision.clone(),
            build,
            test,
            started_at,
            finished_at: Utc::now(),
            workdir,
        }
    }

    /// Runs every unit of `plan` on up to `parallelism` threads. Results
    /// come back in plan order.
    pub fn run_plan(&self, plan: &TestPlan, parallelism: usize) -> Vec<CellResult> {
        self.run_plan_observed(plan, parallelism, &|_| {})
    }

    pub fn run_plan_observed(
        &self,
        plan: &TestPlan,
        parallelism: usize,
        observer: &(dyn Fn(PlanEvent<'_>) + Sync),
    ) -> Vec<CellResult> {
        let slots: Vec<Mutex<Option<CellResult>>> =
            plan.units.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = parallelism.max(1).min(plan.units.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let index = next.fetch_add(1, Ordering::SeqCst);
                    let Some(unit) = plan.units.get(index) else {
                        break;
                    };
                    observer(PlanEvent::Started { index, unit });
                    let cell = self.run_unit(unit);
                    observer(PlanEvent::Finished { index, cell: &cell });
                    *slots[index].lock().unwrap_or_else(|e| e.into_inner()) = Some(cell);
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| {
                slot.into_inner()
                    .unwrap_or_else(|e| e.into_inner())
                    .expect("every unit produces a cell")
            })
            .collect()
    }
}
