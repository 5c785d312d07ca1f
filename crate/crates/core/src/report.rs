//! Dashboard model and renderers.
//!
//! Rows are codes, columns are platforms, and each cell shows the build and
//! test phases as two colored sub-cells:
//!
//! | phase state                  | color  |
//! |------------------------------|--------|
//! | failed or timed out          | red    |
//! | still running                | yellow |
//! | succeeded / passed           | green  |
//! | test skipped (build failed)  | grey   |

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{path_component, BuildStatus, CellResult, TestStatus};
use crate::manifest::Manifest;

pub const DASHBOARD_FILE: &str = "dashboard.html";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("duplicate result for code {code:?} on platform {platform:?}")]
    DuplicateCell { code: String, platform: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildState {
    Succeeded,
    Failed,
    Running,
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestState {
    Passed,
    Failed,
    Running,
    Skipped,
    TimedOut,
}

impl From<BuildStatus> for BuildState {
    fn from(s: BuildStatus) -> Self {
        match s {
            BuildStatus::Succeeded => BuildState::Succeeded,
            BuildStatus::Failed => BuildState::Failed,
            BuildStatus::TimedOut => BuildState::TimedOut,
        }
    }
}

impl From<TestStatus> for TestState {
    fn from(s: TestStatus) -> Self {
        match s {
            TestStatus::Passed => TestState::Passed,
            TestStatus::Failed => TestState::Failed,
            TestStatus::TimedOut => TestState::TimedOut,
            TestStatus::Skipped => TestState::Skipped,
        }
    }
}

impl BuildState {
    pub fn color(self) -> Color {
        match self {
            BuildState::Succeeded => Color::Green,
            BuildState::Running => Color::Yellow,
            BuildState::Failed | BuildState::TimedOut => Color::Red,
        }
    }

    fn label(self) -> &'static str {
        match self {
            BuildState::Succeeded => "succeeded",
            BuildState::Failed => "failed",
            BuildState::Running => "running",
            BuildState::TimedOut => "timed out",
        }
    }
}

impl TestState {
    pub fn color(self) -> Color {
        match self {
            TestState::Passed => Color::Green,
            TestState::Running => Color::Yellow,
            TestState::Failed | TestState::TimedOut => Color::Red,
            TestState::Skipped => Color::Grey,
        }
    }

    fn label(self) -> &'static str {
        match self {
            TestState::Passed => "passed",
            TestState::Failed => "failed",
            TestState::Running => "running",
            TestState::Skipped => "skipped",
            TestState::TimedOut => "timed out",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Yellow,
    Green,
    Grey,
}

impl Color {
    pub fn css_class(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Yellow => "yellow",
            Color::Green => "green",
            Color::Grey => "grey",
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.css_class())
    }
}

/// Dashboard state of one (code, platform) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub build: BuildState,
    pub test: TestState,
    pub revision: Option<String>,
    pub build_log: Option<PathBuf>,
    pub test_log: Option<PathBuf>,
}

impl CellStatus {
    /// An in-flight cell: neither phase has a verdict yet.
    pub fn running() -> Self {
        CellStatus {
            build: BuildState::Running,
            test: TestState::Running,
            revision: None,
            build_log: None,
            test_log: None,
        }
    }

    pub fn from_result(r: &CellResult) -> Self {
        let test_ran = r.test.status != TestStatus::Skipped;
        CellStatus {
            build: r.build.status.into(),
            test: r.test.status.into(),
            revision: Some(r.revision.clone()),
            build_log: Some(r.build_log_path()),
            test_log: test_ran.then(|| r.test_log_path()),
        }
    }

    pub fn is_green(&self) -> bool {
        self.build == BuildState::Succeeded && self.test == TestState::Passed
    }

    pub fn is_failed(&self) -> bool {
        matches!(self.build, BuildState::Failed | BuildState::TimedOut)
            || matches!(self.test, TestState::Failed | TestState::TimedOut)
    }

    pub fn is_running(&self) -> bool {
        self.build == BuildState::Running || self.test == TestState::Running
    }
}

/// A grid position with or without a result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixCell {
    /// The code does not target this platform, or has not run there yet.
    Empty,
    Status(CellStatus),
}

impl MatrixCell {
    pub fn status(&self) -> Option<&CellStatus> {
        match self {
            MatrixCell::Empty => None,
            MatrixCell::Status(s) => Some(s),
        }
    }
}

/// Row and column order for a matrix.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatrixLayout {
    pub codes: Vec<String>,
    pub platforms: Vec<String>,
}

impl MatrixLayout {
    /// Manifest declaration order.
    pub fn from_manifest(manifest: &Manifest) -> Self {
        MatrixLayout {
            codes: manifest.codes().iter().map(|c| c.id.clone()).collect(),
            platforms: manifest.platforms().iter().map(|p| p.id.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub codes: Vec<String>,
    pub platforms: Vec<String>,
    /// Holds every (code, platform) pair of the grid exactly once.
    pub cells: BTreeMap<(String, String), MatrixCell>,
    pub generated_at: DateTime<Utc>,
}

impl MatrixResult {
    pub fn cell(&self, code: &str, platform: &str) -> &MatrixCell {
        self.cells
            .get(&(code.to_string(), platform.to_string()))
            .unwrap_or(&MatrixCell::Empty)
    }

    /// Statuses in row-major display order.
    pub fn statuses(&self) -> impl Iterator<Item = (&str, &str, &CellStatus)> {
        self.codes.iter().flat_map(move |c| {
            self.platforms.iter().filter_map(move |p| {
                self.cell(c, p)
                    .status()
                    .map(|s| (c.as_str(), p.as_str(), s))
            })
        })
    }

    pub fn all_green(&self) -> bool {
        self.statuses().all(|(_, _, s)| s.is_green())
    }
}

/// Assembles the dashboard grid. Rows and columns follow `layout`; ids
/// that only appear in results are appended in sorted order.
pub fn build_matrix(
    layout: &MatrixLayout,
    results: &[CellResult],
    running: &[(String, String)],
) -> Result<MatrixResult, ReportError> {
    let mut filled: BTreeMap<(String, String), CellStatus> = BTreeMap::new();
    let entries = results
        .iter()
        .map(|r| {
            (
                (r.code_id.clone(), r.platform_id.clone()),
                CellStatus::from_result(r),
            )
        })
        .chain(running.iter().map(|k| (k.clone(), CellStatus::running())));
    for (key, status) in entries {
        if filled.contains_key(&key) {
            return Err(ReportError::DuplicateCell {
                code: key.0,
                platform: key.1,
            });
        }
        filled.insert(key, status);
    }

    let mut codes = layout.codes.clone();
    let mut platforms = layout.platforms.clone();
    let mut extra_codes: Vec<String> = Vec::new();
    let mut extra_platforms: Vec<String> = Vec::new();
    for (c, p) in filled.keys() {
        if !codes.contains(c) && !extra_codes.contains(c) {
            extra_codes.push(c.clone());
        }
        if !platforms.contains(p) && !extra_platforms.contains(p) {
            extra_platforms.push(p.clone());
        }
    }
    extra_codes.sort();
    extra_platforms.sort();
    codes.extend(extra_codes);
    platforms.extend(extra_platforms);

    let mut cells = BTreeMap::new();
    for c in &codes {
        for p in &platforms {
            let key = (c.clone(), p.clone());
            let cell = match filled.remove(&key) {
                Some(s) => MatrixCell::Status(s),
                None => MatrixCell::Empty,
            };
            cells.insert(key, cell);
        }
    }
    Ok(MatrixResult {
        codes,
        platforms,
        cells,
        generated_at: Utc::now(),
    })
}

fn escape(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for c in raw.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

const STYLE: &str = "\
body { font-family: sans-serif; margin: 1.5em; }
table.matrix { border-collapse: collapse; }
table.matrix th, table.matrix td { border: 1px solid #999; padding: 0.3em 0.6em; text-align: center; }
table.matrix th.code { text-align: left; }
td.red { background: #e05252; }
td.yellow { background: #f2d447; }
td.green { background: #5cb85c; }
td.grey { background: #b0b0b0; }
td.none { background: #ffffff; color: #999; }
td a { color: inherit; }
p.generated { color: #666; font-size: 0.9em; }
";

fn phase_cell(
    out: &mut String,
    phase: &str,
    color: Color,
    label: &str,
    timed_out: bool,
    log: Option<&Path>,
) {
    let text = if timed_out {
        format!("{phase} (timeout)")
    } else {
        phase.to_string()
    };
    let _ = write!(
        out,
        "<td class=\"{}\" title=\"{}: {}\">",
        color.css_class(),
        phase,
        label
    );
    match log {
        Some(path) => {
            let _ = write!(
                out,
                "<a href=\"{}\">{}</a>",
                escape(&path.display().to_string()),
                escape(&text)
            );
        }
        None => out.push_str(&escape(&text)),
    }
    out.push_str("</td>");
}

/// Static HTML dashboard. The output depends only on `matrix`.
pub fn render_html(matrix: &MatrixResult) -> String {
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n");
    out.push_str("<title>Build and test dashboard</title>\n<style>\n");
    out.push_str(STYLE);
    out.push_str("</style>\n</head>\n<body>\n<h1>Build and test dashboard</h1>\n");
    let _ = writeln!(
        out,
        "<p class=\"generated\">Generated {}</p>",
        matrix.generated_at.format("%Y-%m-%d %H:%M:%S UTC")
    );
    out.push_str("<table class=\"matrix\">\n<tr><th></th>");
    for p in &matrix.platforms {
        let _ = write!(out, "<th colspan=\"2\">{}</th>", escape(p));
    }
    out.push_str("</tr>\n");
    for c in &matrix.codes {
        let _ = write!(out, "<tr><th class=\"code\">{}</th>", escape(c));
        for p in &matrix.platforms {
            match matrix.cell(c, p) {
                MatrixCell::Empty => out.push_str("<td class=\"none\" colspan=\"2\">&ndash;</td>"),
                MatrixCell::Status(s) => {
                    phase_cell(
                        &mut out,
                        "build",
                        s.build.color(),
                        s.build.label(),
                        s.build == BuildState::TimedOut,
                        s.build_log.as_deref(),
                    );
                    phase_cell(
                        &mut out,
                        "test",
                        s.test.color(),
                        s.test.label(),
                        s.test == TestState::TimedOut,
                        s.test_log.as_deref(),
                    );
                }
            }
        }
        out.push_str("</tr>\n");
    }
    out.push_str("</table>\n");
    out.push_str(
        "<p>Red: failed build or test. Yellow: still running. Green: success. \
         Grey: test not run because the build failed.</p>\n",
    );
    out.push_str("</body>\n</html>\n");
    out
}

/// Per-phase and per-cell tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    /// Fully green cells.
    pub passed: usize,
    /// Cells with a red phase.
    pub failed: usize,
    /// Cells with a phase still running.
    pub running: usize,
    /// Cells whose test phase was skipped.
    pub skipped: usize,
    pub build_succeeded: usize,
    pub build_failed: usize,
    pub build_running: usize,
    pub test_passed: usize,
    pub test_failed: usize,
    pub test_running: usize,
    pub test_skipped: usize,
    /// Grid positions without a result.
    pub empty: usize,
}

pub fn count(matrix: &MatrixResult) -> Counts {
    let mut n = Counts::default();
    for c in &matrix.codes {
        for p in &matrix.platforms {
            let Some(s) = matrix.cell(c, p).status() else {
                n.empty += 1;
                continue;
            };
            if s.is_green() {
                n.passed += 1;
            } else if s.is_failed() {
                n.failed += 1;
            } else if s.is_running() {
                n.running += 1;
            }
            if s.test == TestState::Skipped {
                n.skipped += 1;
            }
            match s.build {
                BuildState::Succeeded => n.build_succeeded += 1,
                BuildState::Failed | BuildState::TimedOut => n.build_failed += 1,
                BuildState::Running => n.build_running += 1,
            }
            match s.test {
                TestState::Passed => n.test_passed += 1,
                TestState::Failed | TestState::TimedOut => n.test_failed += 1,
                TestState::Running => n.test_running += 1,
                TestState::Skipped => n.test_skipped += 1,
            }
        }
    }
    n
}

/// Plain-text summary suitable as an e-mail body.
pub fn render_summary(matrix: &MatrixResult) -> String {
    let n = count(matrix);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} ({} codes x {} platforms)",
        n.failed,
        if n.failed == 1 { "failure" } else { "failures" },
        matrix.codes.len(),
        matrix.platforms.len()
    );
    let _ = writeln!(
        out,
        "{} passed, {} failed, {} running, {} skipped",
        n.passed, n.failed, n.running, n.skipped
    );
    let empty = if n.empty > 0 {
        format!(", {} not run", n.empty)
    } else {
        String::new()
    };
    let _ = writeln!(
        out,
        "build: {} succeeded, {} failed, {} running{empty}",
        n.build_succeeded, n.build_failed, n.build_running
    );
    let _ = writeln!(
        out,
        "test: {} passed, {} failed, {} running, {} skipped{empty}",
        n.test_passed, n.test_failed, n.test_running, n.test_skipped
    );

    let mut details = Vec::new();
    for (c, p, s) in matrix.statuses() {
        let log = |path: &Option<PathBuf>| {
            path.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "-".into())
        };
        if s.build != BuildState::Succeeded {
            details.push(format!(
                "{c} {p} build {}: {}",
                s.build.label(),
                log(&s.build_log)
            ));
        } else if s.test != TestState::Passed {
            details.push(format!(
                "{c} {p} test {}: {}",
                s.test.label(),
                log(&s.test_log)
            ));
        }
    }
    if !details.is_empty() {
        out.push('\n');
        for d in details {
            out.push_str(&d);
            out.push('\n');
        }
    }
    out
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Writes `dashboard.html` and `summary.txt` into `dir`.
pub fn write_reports(dir: &Path, matrix: &MatrixResult) -> io::Result<(PathBuf, PathBuf)> {
    let html = dir.join(DASHBOARD_FILE);
    let summary = dir.join(SUMMARY_FILE);
    write_atomic(&html, render_html(matrix).as_bytes())?;
    write_atomic(&summary, render_summary(matrix).as_bytes())?;
    Ok((html, summary))
}

/// Latest cell result per (code, platform), stored as
/// `<root>/<code>/<platform>.json`.
#[derive(Debug, Clone)]
pub struct ResultStore {
    root: PathBuf,
}

impl ResultStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResultStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, code: &str, platform: &str) -> PathBuf {
        self.root
            .join(path_component(code))
            .join(format!("{}.json", path_component(platform)))
    }

    pub fn save(&self, cell: &CellResult) -> io::Result<()> {
        let bytes = serde_json::to_vec_pretty(cell).map_err(io::Error::other)?;
        write_atomic(&self.path_for(&cell.code_id, &cell.platform_id), &bytes)
    }

    pub fn load(&self, code: &str, platform: &str) -> io::Result<Option<CellResult>> {
        match fs::read(self.path_for(code, platform)) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Every stored result, sorted by (code, platform). Unreadable files are
    /// skipped with a warning.
    pub fn load_all(&self) -> io::Result<Vec<CellResult>> {
        let mut out = Vec::new();
        let codes = match fs::read_dir(&self.root) {
            Ok(rd) => rd,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e),
        };
        for code_dir in codes {
            let code_dir = code_dir?.path();
            if !code_dir.is_dir() {
                continue;
            }
            for file in fs::read_dir(&code_dir)? {
                let path = file?.path();
                if path.extension().is_none_or(|e| e != "json") {
                    continue;
                }
                match fs::read(&path).map_err(|e| e.to_string()).and_then(|b| {
                    serde_json::from_slice::<CellResult>(&b).map_err(|e| e.to_string())
                }) {
                    Ok(cell) => out.push(cell),
                    Err(e) => log::warn!("skipping {}: {e}", path.display()),
                }
            }
        }
        out.sort_by(|a, b| (&a.code_id, &a.platform_id).cmp(&(&b.code_id, &b.platform_id)));
        Ok(out)
    }
}
