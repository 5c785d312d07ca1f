//! Command-line front end and daemon loop.
//!
//! Exit codes: 0 success or all green, 1 build/test failures, 2 usage,
//! configuration or comparator errors, 3 data directory locked.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs::{self, File, TryLockError};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::compare::{self, Metric};
use crate::executor::{Executor, PlanEvent};
use crate::manifest::{load_manifest, Manifest};
use crate::poller::{self, ShellProbe, DEFAULT_POLL_INTERVAL_S};
use crate::queue::{JobPayload, JobRecord, Outcome, Queue};
use crate::report::{self, MatrixLayout, ResultStore};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURES: u8 = 1;
pub const EXIT_ERROR: u8 = 2;
pub const EXIT_LOCKED: u8 = 3;

pub const DEFAULT_PARALLELISM: usize = 4;
pub const DEFAULT_DATA_DIR: &str = "geoforge-data";

const LOCK_FILE: &str = "geoforge.lock";
const QUEUE_FILE: &str = "queue.jsonl";
const POLL_STATE_FILE: &str = "poll_state.json";
const RESULTS_DIR: &str = "results";
const IDLE_TICK: Duration = Duration::from_millis(200);

#[derive(Debug, Parser)]
#[command(
    name = "geoforge",
    version,
    about = "Build and test scientific codes across platforms"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true, env = "GEOFORGE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Manifest describing platforms, libraries, tests and codes.
    #[arg(long, global = true, env = "GEOFORGE_MANIFEST")]
    pub manifest: Option<PathBuf>,
    /// Directory for the queue, caches, work directories and results.
    #[arg(long, global = true, env = "GEOFORGE_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Where dashboard.html and summary.txt are written.
    #[arg(long, global = true)]
    pub report_dir: Option<PathBuf>,
    /// Seconds between polls in daemon mode.
    #[arg(long, global = true)]
    pub poll_interval: Option<u64>,
    /// Number of plan units executed concurrently.
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Probe every code once and enqueue a test run per new revision.
    Poll,
    /// Build and test one code on all its platforms, bypassing the queue.
    Run {
        code: String,
        /// Revision to test; probed when omitted.
        #[arg(long)]
        revision: Option<String>,
    },
    /// Poll, execute queued jobs and keep the reports current.
    Daemon {
        /// Stop once the queue is drained after the first poll.
        #[arg(long)]
        exit_when_idle: bool,
    },
    /// Compare a candidate time series against a golden one.
    Compare {
        golden: PathBuf,
        candidate: PathBuf,
        #[arg(long)]
        metric: Metric,
        #[arg(long, visible_alias = "tol")]
        threshold: Option<f64>,
        /// Write a time, abs_diff, rel_diff table here.
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Render the dashboard and summary from stored results.
    Report {
        /// Output directory (defaults to the configured report directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Queue(QueueCommand),
    #[command(subcommand)]
    Cache(CacheCommand),
}

#[derive(Debug, Subcommand)]
pub enum QueueCommand {
    /// List jobs.
    Ls,
    /// Drop finished jobs from the log.
    Compact,
}

#[derive(Debug, Subcommand)]
pub enum CacheCommand {
    /// List cached library builds.
    Ls,
    /// Remove cached builds so they are rebuilt on next use.
    Invalidate {
        #[arg(long)]
        library: Option<String>,
        #[arg(long)]
        platform: Option<String>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_ERROR,
            message: message.into(),
        }
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::usage(e.to_string())
    }
}

type CliResult = Result<u8, CliError>;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    manifest: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    report_dir: Option<PathBuf>,
    poll_interval_s: Option<u64>,
    parallelism: Option<usize>,
}

/// Effective settings after merging defaults, the config file, environment
/// and flags (later sources win).
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub manifest_path: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub report_dir: PathBuf,
    pub poll_interval_s: u64,
    pub parallelism: usize,
}

impl Config {
    pub fn resolve(args: &GlobalArgs) -> Result<Self, CliError> {
        let (file, base) = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
                let file: ConfigFile = toml::from_str(&text)
                    .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (file, base)
            }
            None => (ConfigFile::default(), PathBuf::new()),
        };
        let from_file = |p: Option<PathBuf>| p.map(|p| base.join(p));
        let data_dir = args
            .data_dir
            .clone()
            .or_else(|| from_file(file.data_dir))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
        let report_dir = args
            .report_dir
            .clone()
            .or_else(|| from_file(file.report_dir))
            .unwrap_or_else(|| data_dir.join("report"));
        let config = Config {
            manifest_path: args.manifest.clone().or_else(|| from_file(file.manifest)),
            report_dir,
            data_dir,
            poll_interval_s: args
                .poll_interval
                .or(file.poll_interval_s)
                .unwrap_or(DEFAULT_POLL_INTERVAL_S),
            parallelism: args
                .parallelism
                .or(file.parallelism)
                .unwrap_or(DEFAULT_PARALLELISM),
        };
        if config.poll_interval_s == 0 {
            return Err(CliError::usage("poll interval must be at least 1 second"));
        }
        if config.parallelism == 0 {
            return Err(CliError::usage("parallelism must be at least 1"));
        }
        Ok(config)
    }

    fn manifest(&self) -> Result<Manifest, CliError> {
        let path = self
            .manifest_path
            .as_ref()
            .ok_or_else(|| CliError::usage("no manifest configured (use --manifest)"))?;
        Ok(load_manifest(path)?)
    }

    fn queue_path(&self) -> PathBuf {
        self.data_dir.join(QUEUE_FILE)
    }

    fn results(&self) -> ResultStore {
        ResultStore::new(self.data_dir.join(RESULTS_DIR))
    }

    fn ensure_data_dir(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.data_dir).map_err(|e| {
            CliError::usage(format!("data directory {}: {e}", self.data_dir.display()))
        })
    }
}

/// Exclusive advisory lock on the data directory, held until dropped.
pub struct DataDirLock {
    _file: File,
}

pub fn lock_data_dir(data_dir: &Path) -> Result<DataDirLock, CliError> {
    fs::create_dir_all(data_dir)?;
    let path = data_dir.join(LOCK_FILE);
    let file = File::options()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)?;
    match file.try_lock() {
        Ok(()) => Ok(DataDirLock { _file: file }),
        Err(TryLockError::WouldBlock) => Err(CliError {
            code: EXIT_LOCKED,
            message: format!(
                "{} is in use by another geoforge process",
                data_dir.display()
            ),
        }),
        Err(TryLockError::Error(e)) => Err(CliError::usage(format!("{}: {e}", path.display()))),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("geoforge: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    if let Command::Compare {
        golden,
        candidate,
        metric,
        threshold,
        profile,
    } = &cli.command
    {
        return cmd_compare(golden, candidate, *metric, *threshold, profile.as_deref());
    }
    let config = Config::resolve(&cli.global)?;
    match cli.command {
        Command::Poll => cmd_poll(&config),
        Command::Run { code, revision } => cmd_run(&config, &code, revision.as_deref()),
        Command::Daemon { exit_when_idle } => cmd_daemon(&config, exit_when_idle),
        Command::Report { out } => cmd_report(&config, out.as_deref()),
        Command::Queue(QueueCommand::Ls) => cmd_queue_ls(&config),
        Command::Queue(QueueCommand::Compact) => cmd_queue_compact(&config),
        Command::Cache(CacheCommand::Ls) => cmd_cache_ls(&config),
        Command::Cache(CacheCommand::Invalidate { library, platform }) => {
            cmd_cache_invalidate(&config, library.as_deref(), platform.as_deref())
        }
        Command::Compare { .. } => unreachable!("handled above"),
    }
}

pub fn cmd_compare(
    golden: &Path,
    candidate: &Path,
    metric: Metric,
    threshold: Option<f64>,
    profile: Option<&Path>,
) -> CliResult {
    let g = compare::parse_timeseries(golden)?;
    let c = compare::parse_timeseries(candidate)?;
    let result = compare::compare(metric, &g, &c, threshold)?;
    if let Some(path) = profile {
        let diff = compare::difference_profile(&g, &c)?;
        let mut file = File::create(path)?;
        compare::write_profile(&mut file, g.times(), &diff)?;
    }
    let flag = result.flag.map(|f| format!(" ({f:?})")).unwrap_or_default();
    println!(
        "{} {}: statistic {} threshold {}{flag}",
        metric,
        if result.passed { "PASS" } else { "FAIL" },
        result.statistic,
        result.threshold
    );
    Ok(if result.passed {
        EXIT_OK
    } else {
        EXIT_FAILURES
    })
}

pub fn cmd_poll(config: &Config) -> CliResult {
    let manifest = config.manifest()?;
    let _lock = lock_data_dir(&config.data_dir)?;
    let queue = Queue::open_path(&config.queue_path())?;
    let probe = ShellProbe::new(manifest.base_dir());
    let report = poller::run_cycle(
        &manifest,
        &config.data_dir.join(POLL_STATE_FILE),
        &queue,
        &probe,
    )?;
    for (code, e) in &report.failures {
        log::warn!("{code}: {e}");
    }
    let n = report.jobs.len();
    println!("{n} {} enqueued", if n == 1 { "job" } else { "jobs" });
    for (id, event) in report.jobs.iter().zip(&report.events) {
        println!("{id} {} {}", event.code_id, event.new_revision);
    }
    Ok(EXIT_OK)
}

/// Shared state for runs that update results and reports as cells finish.
struct Pipeline<'a> {
    config: &'a Config,
    manifest: &'a Manifest,
    executor: Executor,
    results: ResultStore,
    running: Mutex<BTreeSet<(String, String)>>,
}

impl<'a> Pipeline<'a> {
    fn new(config: &'a Config, manifest: &'a Manifest) -> Self {
        Pipeline {
            config,
            manifest,
            executor: Executor::new(&config.data_dir),
            results: config.results(),
            running: Mutex::new(BTreeSet::new()),
        }
    }

    fn render(&self, running: &BTreeSet<(String, String)>) {
        let outcome = self
            .results
            .load_all()
            .map_err(|e| e.to_string())
            .and_then(|stored| {
                let stored: Vec<_> = stored
                    .into_iter()
                    .filter(|c| !running.contains(&(c.code_id.clone(), c.platform_id.clone())))
                    .collect();
                let running: Vec<_> = running.iter().cloned().collect();
                let matrix = report::build_matrix(
                    &MatrixLayout::from_manifest(self.manifest),
                    &stored,
                    &running,
                )
                .map_err(|e| e.to_string())?;
                report::write_reports(&self.config.report_dir, &matrix).map_err(|e| e.to_string())
            });
        if let Err(e) = outcome {
            log::error!("cannot write reports: {e}");
        }
    }

    /// Executes one code revision; returns the cells and whether every
    /// result was stored.
    fn execute(
        &self,
        code: &str,
        revision: &str,
    ) -> Result<(Vec<crate::executor::CellResult>, bool), CliError> {
        let plan = self.manifest.generate_test_plan(code, revision)?;
        let stored = AtomicBool::new(true);
        let observer = |event: PlanEvent<'_>| {
            let mut running = self.running.lock().unwrap_or_else(|e| e.into_inner());
            match event {
                PlanEvent::Started { unit, .. } => {
                    running.insert((unit.code_id.clone(), unit.platform.id.clone()));
                }
                PlanEvent::Finished { cell, .. } => {
                    log::info!(
                        "{} {} {}: build {:?}, test {:?}",
                        cell.code_id,
                        cell.platform_id,
                        cell.revision,
                        cell.build.status,
                        cell.test.status
                    );
                    if let Err(e) = self.results.save(cell) {
                        log::error!(
                            "cannot store result for {} {}: {e}",
                            cell.code_id,
                            cell.platform_id
                        );
                        stored.store(false, Ordering::SeqCst);
                    }
                    running.remove(&(cell.code_id.clone(), cell.platform_id.clone()));
                }
            }
            self.render(&running);
        };
        let cells = self
            .executor
            .run_plan_observed(&plan, self.config.parallelism, &observer);
        Ok((cells, stored.load(Ordering::SeqCst)))
    }
}

pub fn cmd_run(config: &Config, code: &str, revision: Option<&str>) -> CliResult {
    let manifest = config.manifest()?;
    let spec = manifest
        .code(code)
        .ok_or_else(|| CliError::usage(format!("unknown code {code:?}")))?;
    let _lock = lock_data_dir(&config.data_dir)?;
    let revision = match revision {
        Some(r) => r.to_string(),
        None => {
            use crate::poller::RevisionProbe;
            ShellProbe::new(manifest.base_dir())
                .probe(spec)
                .map_err(|e| CliError::usage(format!("{code}: {e}")))?
        }
    };
    let pipeline = Pipeline::new(config, &manifest);
    let (cells, _) = pipeline.execute(code, &revision)?;
    pipeline.render(&BTreeSet::new());
    let matrix = report::build_matrix(&MatrixLayout::from_manifest(&manifest), &cells, &[])?;
    print!("{}", report::render_summary(&matrix));
    Ok(if cells.iter().all(|c| c.is_green()) {
        EXIT_OK
    } else {
        EXIT_FAILURES
    })
}

pub fn cmd_daemon(config: &Config, exit_when_idle: bool) -> CliResult {
    let manifest = config.manifest()?;
    let _lock = lock_data_dir(&config.data_dir)?;
    let shutdown = Arc::new(AtomicBool::new(false));
    for signal in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(signal, Arc::clone(&shutdown))?;
    }
    let queue = Queue::open_path(&config.queue_path())?;
    let recovered = queue.recover()?;
    if recovered > 0 {
        log::info!("recovered {recovered} interrupted job(s)");
    }
    let pipeline = Pipeline::new(config, &manifest);
    let probe = ShellProbe::new(manifest.base_dir());
    let state_path = config.data_dir.join(POLL_STATE_FILE);
    let interval = Duration::from_secs(config.poll_interval_s);
    pipeline.render(&BTreeSet::new());

    let mut next_poll = Instant::now();
    while !shutdown.load(Ordering::SeqCst) {
        drain(&pipeline, &queue, &shutdown)?;
        if shutdown.load(Ordering::SeqCst) {
            break;
        }
        if Instant::now() < next_poll {
            thread::sleep(IDLE_TICK.min(next_poll - Instant::now()));
            continue;
        }
        match poller::run_cycle(&manifest, &state_path, &queue, &probe) {
            Ok(report) => {
                if !report.jobs.is_empty() {
                    log::info!("enqueued {} job(s)", report.jobs.len());
                }
            }
            Err(e) => log::error!("poll failed: {e}"),
        }
        next_poll = Instant::now() + interval;
        if exit_when_idle {
            drain(&pipeline, &queue, &shutdown)?;
            break;
        }
    }
    log::info!("daemon stopped");
    Ok(EXIT_OK)
}

/// Runs queued jobs until the queue is empty or shutdown is requested.
fn drain(pipeline: &Pipeline<'_>, queue: &Queue, shutdown: &AtomicBool) -> Result<(), CliError> {
    while !shutdown.load(Ordering::SeqCst) {
        let Some(record) = queue.claim()? else {
            return Ok(());
        };
        run_job(pipeline, queue, &record)?;
    }
    Ok(())
}

fn run_job(pipeline: &Pipeline<'_>, queue: &Queue, record: &JobRecord) -> Result<(), CliError> {
    let id = record.job.id;
    let JobPayload::TestRun { code_id, revision } = &record.job.payload;
    log::info!(
        "job {id}: {} (attempt {})",
        record.job.payload,
        record.attempts
    );
    if pipeline.manifest.code(code_id).is_none() {
        log::warn!("job {id}: code {code_id:?} is no longer in the manifest");
        queue.acknowledge(id, Outcome::Failed)?;
        return Ok(());
    }
    let (_, stored) = pipeline.execute(code_id, revision)?;
    if stored {
        queue.acknowledge(id, Outcome::Done)?;
    } else {
        let status = queue.release_for_retry(id)?;
        log::warn!("job {id}: results not stored, now {status}");
    }
    pipeline.render(&BTreeSet::new());
    Ok(())
}

pub fn cmd_report(config: &Config, out: Option<&Path>) -> CliResult {
    let layout = match &config.manifest_path {
        Some(_) => MatrixLayout::from_manifest(&config.manifest()?),
        None => MatrixLayout::default(),
    };
    let results = config.results().load_all()?;
    let matrix = report::build_matrix(&layout, &results, &[])?;
    let dir = out.unwrap_or(&config.report_dir);
    let (html, summary) = report::write_reports(dir, &matrix)?;
    println!("{}", html.display());
    println!("{}", summary.display());
    Ok(EXIT_OK)
}

pub fn cmd_queue_ls(config: &Config) -> CliResult {
    let path = config.queue_path();
    if !path.exists() {
        println!("no jobs");
        return Ok(EXIT_OK);
    }
    let queue = Queue::open_path_read_only(&path)?;
    for r in queue.records() {
        println!(
            "{}\t{}\t{}\t{}\t{}",
            r.job.id,
            r.status,
            r.attempts,
            r.job.created_at.format("%Y-%m-%dT%H:%M:%SZ"),
            r.job.payload
        );
    }
    Ok(EXIT_OK)
}

pub fn cmd_queue_compact(config: &Config) -> CliResult {
    config.ensure_data_dir()?;
    let _lock = lock_data_dir(&config.data_dir)?;
    let queue = Queue::open_path(&config.queue_path())?;
    let dropped = queue.compact()?;
    println!(
        "{dropped} finished jobs removed, {} kept",
        queue.records().len()
    );
    Ok(EXIT_OK)
}

pub fn cmd_cache_ls(config: &Config) -> CliResult {
    let executor = Executor::new(&config.data_dir);
    for e in executor.cache().entries()? {
        println!(
            "{}\t{}\t{}\t{}\t{}",
            e.key.platform_id,
            e.key.library_id,
            e.key.version,
            e.built_at.format("%Y-%m-%dT%H:%M:%SZ"),
            e.install_dir.display()
        );
    }
    Ok(EXIT_OK)
}

pub fn cmd_cache_invalidate(
    config: &Config,
    library: Option<&str>,
    platform: Option<&str>,
) -> CliResult {
    let _lock = lock_data_dir(&config.data_dir)?;
    let executor = Executor::new(&config.data_dir);
    let n = executor.cache().invalidate(library, platform)?;
    println!(
        "{n} cache {} invalidated",
        if n == 1 { "entry" } else { "entries" }
    );
    Ok(EXIT_OK)
}
