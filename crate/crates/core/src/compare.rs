//! Numerical output comparison.
//!
//! Outputs are two-column ASCII time series (`time value`). Cross-platform
//! runs of the same simulation rarely agree bit-for-bit, so besides an exact
//! comparator this module offers tolerance-based (absolute, relative, l2)
//! and correlation-based comparators. Every comparator returns a
//! [`ComparisonResult`] whose `passed` flag depends only on the metric, the
//! statistic and the threshold.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum per-sample disagreement between two time axes, in seconds.
pub const TIME_AXIS_TOLERANCE: f64 = 1e-9;

/// Threshold used for `correlation` when a test does not specify one.
pub const DEFAULT_CORRELATION_THRESHOLD: f64 = 0.999;

/// Threshold used for `l2` when a test does not specify one.
pub const DEFAULT_L2_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("{path}:{line}: malformed line, expected `<time> <value>`: {content:?}")]
    Malformed {
        path: String,
        line: usize,
        content: String,
    },
    #[error("{path}:{line}: time {time} does not increase (previous {previous})")]
    NonIncreasingTime {
        path: String,
        line: usize,
        time: f64,
        previous: f64,
    },
    #[error("{path}:{line}: non-finite number")]
    NonFinite { path: String, line: usize },
    #[error("{path}: no samples")]
    Empty { path: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompareError {
    #[error("length mismatch: reference has {reference} samples, candidate has {candidate}")]
    LengthMismatch { reference: usize, candidate: usize },
    #[error("time axes differ at sample {index}: {reference} vs {candidate}")]
    TimeAxisMismatch {
        index: usize,
        reference: f64,
        candidate: f64,
    },
    #[error(
        "{which} signal has zero variance; correlation is undefined, use the absolute comparator"
    )]
    ZeroVariance { which: &'static str },
    #[error("correlation needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("invalid threshold {value} for metric {metric}: {reason}")]
    InvalidThreshold {
        metric: Metric,
        value: f64,
        reason: &'static str,
    },
    #[error("metric {0} requires an explicit tolerance")]
    MissingThreshold(Metric),
}

/// A sampled time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    times: Vec<f64>,
    values: Vec<f64>,
    label: String,
}

impl Signal {
    /// Builds a signal, checking that it is nonempty, finite, and that the
    /// time axis is strictly increasing.
    pub fn new(
        times: Vec<f64>,
        values: Vec<f64>,
        label: impl Into<String>,
    ) -> Result<Self, SignalError> {
        if times.len() != values.len() {
            return Err(SignalError::ColumnLengths(times.len(), values.len()));
        }
        if times.is_empty() {
            return Err(SignalError::Empty);
        }
        for (i, (t, v)) in times.iter().zip(&values).enumerate() {
            if !t.is_finite() || !v.is_finite() {
                return Err(SignalError::NonFinite(i));
            }
            if i > 0 && *t <= times[i - 1] {
                return Err(SignalError::NonIncreasing(i));
            }
        }
        Ok(Signal {
            times,
            values,
            label: label.into(),
        })
    }

    /// Signal with times `0, 1, 2, ...`.
    pub fn from_values(values: Vec<f64>, label: impl Into<String>) -> Result<Self, SignalError> {
        let times = (0..values.len()).map(|i| i as f64).collect();
        Signal::new(times, values, label)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("times and values differ in length ({0} vs {1})")]
    ColumnLengths(usize, usize),
    #[error("signal has no samples")]
    Empty,
    #[error("non-finite entry at sample {0}")]
    NonFinite(usize),
    #[error("time does not increase at sample {0}")]
    NonIncreasing(usize),
}

/// The closed set of comparators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Exact,
    Absolute,
    Relative,
    L2,
    Correlation,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Exact,
        Metric::Absolute,
        Metric::Relative,
        Metric::L2,
        Metric::Correlation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Exact => "exact",
            Metric::Absolute => "absolute",
            Metric::Relative => "relative",
            Metric::L2 => "l2",
            Metric::Correlation => "correlation",
        }
    }

    /// Threshold applied when none is configured, or `None` when the metric
    /// demands an explicit one.
    pub fn default_threshold(self) -> Option<f64> {
        match self {
            Metric::Exact => Some(0.0),
            Metric::Correlation => Some(DEFAULT_CORRELATION_THRESHOLD),
            Metric::L2 => Some(DEFAULT_L2_TOLERANCE),
            Metric::Absolute | Metric::Relative => None,
        }
    }

    /// Correlation is a similarity (higher is better); everything else is a
    /// distance.
    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Correlation)
    }

    /// The pass/fail rule. NaN statistics never pass.
    pub fn passes(self, statistic: f64, threshold: f64) -> bool {
        match self {
            Metric::Exact => statistic == 0.0,
            Metric::Correlation => statistic >= threshold,
            Metric::Absolute | Metric::Relative | Metric::L2 => statistic <= threshold,
        }
    }

    /// Checks that a threshold is meaningful for this metric.
    pub fn validate_threshold(self, value: f64) -> Result<(), CompareError> {
        let reason = if !value.is_finite() {
            Some("must be finite")
        } else {
            match self {
                Metric::Correlation if !(-1.0..=1.0).contains(&value) => {
                    Some("must lie in [-1, 1]")
                }
                Metric::Absolute | Metric::Relative | Metric::L2 if value < 0.0 => {
                    Some("must be nonnegative")
                }
                _ => None,
            }
        };
        match reason {
            Some(reason) => Err(CompareError::InvalidThreshold {
                metric: self,
                value,
                reason,
            }),
            None => Ok(()),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                format!("unknown metric {s:?}; expected one of exact, absolute, relative, l2, correlation")
            })
    }
}

/// Something noteworthy about how a statistic was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonFlag {
    /// Exact comparison of signals of different length; the statistic is the
    /// length difference.
    LengthMismatch,
    /// The l2 reference had zero norm, so the statistic is the absolute norm
    /// of the candidate.
    ZeroReferenceNorm,
}

/// Per-sample absolute and relative differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceProfile {
    pub abs_diff: Vec<f64>,
    pub rel_diff: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub metric: Metric,
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<ComparisonFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<DifferenceProfile>,
}

impl ComparisonResult {
    fn new(metric: Metric, statistic: f64, threshold: f64) -> Self {
        ComparisonResult {
            metric,
            statistic,
            threshold,
            passed: metric.passes(statistic, threshold),
            flag: None,
            profile: None,
        }
    }
}

/// Parses a two-column whitespace-separated time series.
///
/// Blank lines and lines whose first non-blank character is `#` are skipped.
/// Numbers may use decimal or scientific notation.
pub fn parse_timeseries(path: &Path) -> Result<Signal, ParseError> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| ParseError::Io {
        path: display.clone(),
        message: e.to_string(),
    })?;
    let label = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| display.clone());
    parse_timeseries_str(&text, &display).map(|mut s| {
        s.label = label;
        s
    })
}

/// Same as [`parse_timeseries`] on in-memory text; `origin` is used in errors
/// and as the signal label.
pub fn parse_timeseries_str(text: &str, origin: &str) -> Result<Signal, ParseError> {
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let malformed = || ParseError::Malformed {
            path: origin.to_string(),
            line,
            content: raw.to_string(),
        };
        let mut fields = trimmed.split_whitespace();
        let (Some(t), Some(v), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(malformed());
        };
        let t: f64 = t.parse().map_err(|_| malformed())?;
        let v: f64 = v.parse().map_err(|_| malformed())?;
        if !t.is_finite() || !v.is_finite() {
            return Err(ParseError::NonFinite {
                path: origin.to_string(),
                line,
            });
        }
        if let Some(&previous) = times.last() {
            if t <= previous {
                return Err(ParseError::NonIncreasingTime {
                    path: origin.to_string(),
                    line,
                    time: t,
                    previous,
                });
            }
        }
        times.push(t);
        values.push(v);
    }
    if times.is_empty() {
        return Err(ParseError::Empty {
            path: origin.to_string(),
        });
    }
    Ok(Signal {
        times,
        values,
        label: origin.to_string(),
    })
}

fn check_aligned(a: &Signal, b: &Signal) -> Result<(), CompareError> {
    if a.len() != b.len() {
        return Err(CompareError::LengthMismatch {
            reference: a.len(),
            candidate: b.len(),
        });
    }
    for (index, (ta, tb)) in a.times.iter().zip(&b.times).enumerate() {
        if (ta - tb).abs() > TIME_AXIS_TOLERANCE {
            return Err(CompareError::TimeAxisMismatch {
                index,
                reference: *ta,
                candidate: *tb,
            });
        }
    }
    Ok(())
}

fn relative_difference(x: f64, y: f64) -> f64 {
    let scale = x.abs().max(y.abs());
    if scale == 0.0 {
        0.0
    } else {
        (x - y).abs() / scale
    }
}

fn profile_of(a: &Signal, b: &Signal) -> DifferenceProfile {
    let (abs_diff, rel_diff) = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| ((x - y).abs(), relative_difference(*x, *y)))
        .unzip();
    DifferenceProfile { abs_diff, rel_diff }
}

/// Per-sample `|a - b|` and `|a - b| / max(|a|, |b|)` (zero when both are
/// zero).
pub fn difference_profile(a: &Signal, b: &Signal) -> Result<DifferenceProfile, CompareError> {
    check_aligned(a, b)?;
    Ok(profile_of(a, b))
}

/// Bitwise comparison of parsed samples. The statistic counts differing
/// samples, or the length difference when lengths disagree.
pub fn compare_exact(a: &Signal, b: &Signal) -> ComparisonResult {
    if a.len() != b.len() {
        let mut result =
            ComparisonResult::new(Metric::Exact, a.len().abs_diff(b.len()) as f64, 0.0);
        result.flag = Some(ComparisonFlag::LengthMismatch);
        return result;
    }
    let differing = a
        .times
        .iter()
        .zip(&a.values)
        .zip(b.times.iter().zip(&b.values))
        .filter(|((ta, va), (tb, vb))| ta.to_bits() != tb.to_bits() || va.to_bits() != vb.to_bits())
        .count();
    ComparisonResult::new(Metric::Exact, differing as f64, 0.0)
}

/// Maximum absolute per-sample difference.
pub fn compare_absolute(
    a: &Signal,
    b: &Signal,
    tol: f64,
) -> Result<ComparisonResult, CompareError> {
    Metric::Absolute.validate_threshold(tol)?;
    check_aligned(a, b)?;
    let profile = profile_of(a, b);
    let statistic = profile.abs_diff.iter().copied().fold(0.0, f64::max);
    let mut result = ComparisonResult::new(Metric::Absolute, statistic, tol);
    result.profile = Some(profile);
    Ok(result)
}

/// Maximum symmetric relative difference (max-magnitude denominator).
pub fn compare_relative(
    a: &Signal,
    b: &Signal,
    tol: f64,
) -> Result<ComparisonResult, CompareError> {
    Metric::Relative.validate_threshold(tol)?;
    check_aligned(a, b)?;
    let profile = profile_of(a, b);
    let statistic = profile.rel_diff.iter().copied().fold(0.0, f64::max);
    let mut result = ComparisonResult::new(Metric::Relative, statistic, tol);
    result.profile = Some(profile);
    Ok(result)
}

fn euclidean_norm(values: impl Iterator<Item = f64>) -> f64 {
    values.map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖a − b‖₂ / ‖a‖₂`, with `a` as the golden reference. A zero-norm reference
/// falls back to the absolute norm `‖b‖₂` and sets
/// [`ComparisonFlag::ZeroReferenceNorm`].
pub fn compare_l2(a: &Signal, b: &Signal, tol: f64) -> Result<ComparisonResult, CompareError> {
    Metric::L2.validate_threshold(tol)?;
    check_aligned(a, b)?;
    let diff_norm = euclidean_norm(a.values.iter().zip(&b.values).map(|(x, y)| x - y));
    let reference_norm = euclidean_norm(a.values.iter().copied());
    let (statistic, flag) = if reference_norm == 0.0 {
        (
            euclidean_norm(b.values.iter().copied()),
            Some(ComparisonFlag::ZeroReferenceNorm),
        )
    } else {
        (diff_norm / reference_norm, None)
    };
    let mut result = ComparisonResult::new(Metric::L2, statistic, tol);
    result.flag = flag;
    result.profile = Some(profile_of(a, b));
    Ok(result)
}

fn is_constant(values: &[f64]) -> bool {
    values.iter().all(|v| *v == values[0])
}

/// Zero-lag Pearson correlation coefficient.
///
/// A constant signal has no defined correlation and yields
/// [`CompareError::ZeroVariance`] rather than a verdict.
pub fn compare_correlation(
    a: &Signal,
    b: &Signal,
    threshold: f64,
) -> Result<ComparisonResult, CompareError> {
    Metric::Correlation.validate_threshold(threshold)?;
    check_aligned(a, b)?;
    if a.len() < 2 {
        return Err(CompareError::TooShort(a.len()));
    }
    if is_constant(&a.values) {
        return Err(CompareError::ZeroVariance { which: "reference" });
    }
    if is_constant(&b.values) {
        return Err(CompareError::ZeroVariance { which: "candidate" });
    }
    let n = a.len() as f64;
    let mean_a = a.values.iter().sum::<f64>() / n;
    let mean_b = b.values.iter().sum::<f64>() / n;
    let (mut cross, mut var_a, mut var_b) = (0.0, 0.0, 0.0);
    for (x, y) in a.values.iter().zip(&b.values) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        cross += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 {
        return Err(CompareError::ZeroVariance { which: "reference" });
    }
    if var_b == 0.0 {
        return Err(CompareError::ZeroVariance { which: "candidate" });
    }
    let statistic = (cross / (var_a * var_b).sqrt()).clamp(-1.0, 1.0);
    let mut result = ComparisonResult::new(Metric::Correlation, statistic, threshold);
    result.profile = Some(profile_of(a, b));
    Ok(result)
}

/// Dispatches to the comparator for `metric`. `threshold` of `None` uses the
/// metric default, which absolute and relative do not have.
pub fn compare(
    metric: Metric,
    golden: &Signal,
    candidate: &Signal,
    threshold: Option<f64>,
) -> Result<ComparisonResult, CompareError> {
    let threshold = threshold
        .or(metric.default_threshold())
        .ok_or(CompareError::MissingThreshold(metric))?;
    match metric {
        Metric::Exact => Ok(compare_exact(golden, candidate)),
        Metric::Absolute => compare_absolute(golden, candidate, threshold),
        Metric::Relative => compare_relative(golden, candidate, threshold),
        Metric::L2 => compare_l2(golden, candidate, threshold),
        Metric::Correlation => compare_correlation(golden, candidate, threshold),
    }
}

/// Writes `time\tabs_diff\trel_diff` rows with a `#` header line.
pub fn write_profile<W: Write>(
    out: &mut W,
    times: &[f64],
    profile: &DifferenceProfile,
) -> io::Result<()> {
    writeln!(out, "# time\tabs_diff\trel_diff")?;
    for ((t, abs), rel) in times.iter().zip(&profile.abs_diff).zip(&profile.rel_diff) {
        writeln!(out, "{t}\t{abs}\t{rel}")?;
    }
    Ok(())
}
