//! The code database: which codes exist, how to build them, which support
//! libraries and platforms they need, and which tests verify them.
//!
//! The on-disk form is a single TOML document with four arrays of tables,
//! `[[platform]]`, `[[library]]`, `[[test]]` and `[[code]]`. See
//! `docs/manifest.md` for the schema.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compare::Metric;
use crate::template::{self, Context, TemplateError};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse manifest {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("invalid manifest: {0}")]
    Invalid(#[from] ValidationError),
    #[error("unknown code {0:?}")]
    UnknownCode(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("code {code:?} references undefined {kind} {id:?}")]
    DanglingReference {
        code: String,
        kind: &'static str,
        id: String,
    },
    #[error("{kind} {id:?} has no build steps")]
    EmptyBuildSteps { kind: &'static str, id: String },
    #[error("code {0:?} targets no platforms")]
    NoPlatforms(String),
    #[error("{kind} id {id:?} must be nonempty and use only letters, digits, '.', '_' or '-'")]
    BadId { kind: &'static str, id: String },
    #[error("{owner}: {source}")]
    Template {
        owner: String,
        #[source]
        source: TemplateError,
    },
    #[error("test {test:?}: {reason}")]
    BadTest { test: String, reason: String },
    #[error("platform {platform:?}: {reason}")]
    BadPlatform { platform: String, reason: String },
    #[error("library {library:?}: {reason}")]
    BadLibrary { library: String, reason: String },
    #[error("code {code:?}: {reason}")]
    BadCode { code: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformSpec {
    pub id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    /// Root for unit working directories; relative paths resolve against the
    /// data directory.
    #[serde(default = "default_workdir_root")]
    pub workdir_root: PathBuf,
}

fn default_workdir_root() -> PathBuf {
    PathBuf::from("work")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibrarySpec {
    pub id: String,
    pub version: String,
    pub build_steps: Vec<String>,
    /// Path relative to the install directory that must exist after a build.
    pub install_marker: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSpec {
    pub id: String,
    pub run_steps: Vec<String>,
    /// Produced output, relative to the unit working directory.
    pub output_path: PathBuf,
    /// Reference output; relative paths resolve against the manifest's directory.
    pub golden_path: PathBuf,
    pub comparator: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl TestSpec {
    /// Configured threshold, else the comparator's default.
    pub fn effective_threshold(&self) -> Option<f64> {
        self.threshold.or(self.comparator.default_threshold())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeSpec {
    pub id: String,
    #[serde(default)]
    pub repo_url: String,
    pub revision_probe: String,
    pub build_steps: Vec<String>,
    #[serde(default, rename = "libraries")]
    pub library_ids: Vec<String>,
    #[serde(rename = "platforms")]
    pub platform_ids: Vec<String>,
    #[serde(default)]
    pub tests: Vec<String>,
    pub timeout_build_s: u64,
    pub timeout_test_s: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    #[serde(default, rename = "platform")]
    platforms: Vec<PlatformSpec>,
    #[serde(default, rename = "library")]
    libraries: Vec<LibrarySpec>,
    #[serde(default, rename = "test")]
    tests: Vec<TestSpec>,
    #[serde(default, rename = "code")]
    codes: Vec<CodeSpec>,
}

/// A validated manifest. Immutable after load; every cross-reference
/// resolves.
#[derive(Debug, Clone)]
pub struct Manifest {
    platforms: Vec<PlatformSpec>,
    libraries: Vec<LibrarySpec>,
    tests: Vec<TestSpec>,
    codes: Vec<CodeSpec>,
    base_dir: PathBuf,
}

impl PartialEq for Manifest {
    fn eq(&self, other: &Self) -> bool {
        self.platforms == other.platforms
            && self.libraries == other.libraries
            && self.tests == other.tests
            && self.codes == other.codes
    }
}

/// Loads and validates the manifest at `path`.
pub fn load_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Manifest::from_toml_str(&text, &path.display().to_string(), base_dir)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

fn is_plain_relative(path: &Path) -> bool {
    !path.as_os_str().is_empty()
        && path
            .components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

fn unique<'a>(
    kind: &'static str,
    ids: impl Iterator<Item = &'a str>,
) -> Result<HashSet<&'a str>, ValidationError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !valid_id(id) {
            return Err(ValidationError::BadId {
                kind,
                id: id.to_string(),
            });
        }
        if !seen.insert(id) {
            return Err(ValidationError::DuplicateId {
                kind,
                id: id.to_string(),
            });
        }
    }
    Ok(seen)
}

fn check_templates<'a>(
    owner: impl Fn() -> String,
    templates: impl IntoIterator<Item = &'a String>,
    context: Context,
) -> Result<(), ValidationError> {
    for t in templates {
        template::validate(t, context).map_err(|source| ValidationError::Template {
            owner: owner(),
            source,
        })?;
    }
    Ok(())
}

impl ManifestDoc {
    fn validate(&self) -> Result<(), ValidationError> {
        let platforms = unique("platform", self.platforms.iter().map(|p| p.id.as_str()))?;
        let libraries = unique("library", self.libraries.iter().map(|l| l.id.as_str()))?;
        let tests = unique("test", self.tests.iter().map(|t| t.id.as_str()))?;
        unique("code", self.codes.iter().map(|c| c.id.as_str()))?;

        for p in &self.platforms {
            for name in p.env.keys() {
                if name.is_empty() || name.contains('=') || name.contains('\0') {
                    return Err(ValidationError::BadPlatform {
                        platform: p.id.clone(),
                        reason: format!("invalid environment variable name {name:?}"),
                    });
                }
            }
        }

        for l in &self.libraries {
            if l.build_steps.is_empty() {
                return Err(ValidationError::EmptyBuildSteps {
                    kind: "library",
                    id: l.id.clone(),
                });
            }
            if matches!(l.version.as_str(), "" | "." | "..") || l.version.contains('/') {
                return Err(ValidationError::BadLibrary {
                    library: l.id.clone(),
                    reason: format!("invalid version {:?}", l.version),
                });
            }
            if !is_plain_relative(&l.install_marker) {
                return Err(ValidationError::BadLibrary {
                    library: l.id.clone(),
                    reason: "install_marker must be a relative path without '..'".into(),
                });
            }
            check_templates(
                || format!("library {:?}", l.id),
                &l.build_steps,
                Context::LibraryBuild,
            )?;
        }

        for t in &self.tests {
            let bad = |reason: String| ValidationError::BadTest {
                test: t.id.clone(),
                reason,
            };
            if !is_plain_relative(&t.output_path) {
                return Err(bad(
                    "output_path must be a relative path without '..'".into()
                ));
            }
            match t.effective_threshold() {
                None => {
                    return Err(bad(format!(
                        "comparator {} requires an explicit threshold",
                        t.comparator
                    )))
                }
                Some(th) => t
                    .comparator
                    .validate_threshold(th)
                    .map_err(|e| bad(e.to_string()))?,
            }
            check_templates(
                || format!("test {:?}", t.id),
                &t.run_steps,
                Context::TestRun,
            )?;
        }

        for c in &self.codes {
            if c.build_steps.is_empty() {
                return Err(ValidationError::EmptyBuildSteps {
                    kind: "code",
                    id: c.id.clone(),
                });
            }
            if c.platform_ids.is_empty() {
                return Err(ValidationError::NoPlatforms(c.id.clone()));
            }
            if c.timeout_build_s == 0 || c.timeout_test_s == 0 {
                return Err(ValidationError::BadCode {
                    code: c.id.clone(),
                    reason: "timeouts must be positive".into(),
                });
            }
            for (kind, ids, known) in [
                ("library", &c.library_ids, &libraries),
                ("platform", &c.platform_ids, &platforms),
                ("test", &c.tests, &tests),
            ] {
                let mut seen = HashSet::new();
                for id in ids {
                    if !known.contains(id.as_str()) {
                        return Err(ValidationError::DanglingReference {
                            code: c.id.clone(),
                            kind,
                            id: id.clone(),
                        });
                    }
                    if !seen.insert(id) {
                        return Err(ValidationError::BadCode {
                            code: c.id.clone(),
                            reason: format!("{kind} {id:?} listed twice"),
                        });
                    }
                }
            }
            check_templates(
                || format!("code {:?}", c.id),
                [&c.revision_probe],
                Context::RevisionProbe,
            )?;
            check_templates(
                || format!("code {:?}", c.id),
                &c.build_steps,
                Context::CodeBuild,
            )?;
        }
        Ok(())
    }
}

impl Manifest {
    /// Parses and validates manifest text. Relative golden paths will
    /// resolve against `base_dir`.
    pub fn from_toml_str(
        text: &str,
        origin: &str,
        base_dir: impl Into<PathBuf>,
    ) -> Result<Self, ManifestError> {
        let doc: ManifestDoc = toml::from_str(text).map_err(|e| ManifestError::Parse {
            origin: origin.to_string(),
            message: e.to_string(),
        })?;
        doc.validate()?;
        Ok(Manifest {
            platforms: doc.platforms,
            libraries: doc.libraries,
            tests: doc.tests,
            codes: doc.codes,
            base_dir: base_dir.into(),
        })
    }

    pub fn to_toml_string(&self) -> String {
        let doc = ManifestDoc {
            platforms: self.platforms.clone(),
            libraries: self.libraries.clone(),
            tests: self.tests.clone(),
            codes: self.codes.clone(),
        };
        toml::to_string(&doc).expect("manifest records always serialize")
    }

    pub fn codes(&self) -> &[CodeSpec] {
        &self.codes
    }

    pub fn platforms(&self) -> &[PlatformSpec] {
        &self.platforms
    }

    pub fn libraries(&self) -> &[LibrarySpec] {
        &self.libraries
    }

    pub fn tests(&self) -> &[TestSpec] {
        &self.tests
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn code(&self, id: &str) -> Option<&CodeSpec> {
        self.codes.iter().find(|c| c.id == id)
    }

    pub fn platform(&self, id: &str) -> Option<&PlatformSpec> {
        self.platforms.iter().find(|p| p.id == id)
    }

    pub fn library(&self, id: &str) -> Option<&LibrarySpec> {
        self.libraries.iter().find(|l| l.id == id)
    }

    pub fn test(&self, id: &str) -> Option<&TestSpec> {
        self.tests.iter().find(|t| t.id == id)
    }

    /// Expands `code_id` into one unit per declared platform. Pure: touches
    /// no files.
    pub fn generate_test_plan(
        &self,
        code_id: &str,
        revision: &str,
    ) -> Result<TestPlan, ManifestError> {
        let code = self
            .code(code_id)
            .ok_or_else(|| ManifestError::UnknownCode(code_id.to_string()))?;
        if code.platform_ids.is_empty() {
            return Err(ValidationError::NoPlatforms(code.id.clone()).into());
        }
        let dangling = |kind: &'static str, id: &str| {
            ManifestError::Invalid(ValidationError::DanglingReference {
                code: code.id.clone(),
                kind,
                id: id.to_string(),
            })
        };
        let libraries = code
            .library_ids
            .iter()
            .map(|id| {
                self.library(id)
                    .cloned()
                    .ok_or_else(|| dangling("library", id))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let tests = code
            .tests
            .iter()
            .map(|id| {
                let mut t = self.test(id).cloned().ok_or_else(|| dangling("test", id))?;
                t.golden_path = self.base_dir.join(&t.golden_path);
                Ok(t)
            })
            .collect::<Result<Vec<_>, ManifestError>>()?;
        let units = code
            .platform_ids
            .iter()
            .map(|pid| {
                let platform = self
                    .platform(pid)
                    .ok_or_else(|| dangling("platform", pid))?;
                Ok(PlanUnit {
                    code_id: code.id.clone(),
                    revision: revision.to_string(),
                    platform: platform.clone(),
                    libraries: libraries.clone(),
                    build_steps: code.build_steps.clone(),
                    tests: tests.clone(),
                    timeout_build_s: code.timeout_build_s,
                    timeout_test_s: code.timeout_test_s,
                })
            })
            .collect::<Result<Vec<_>, ManifestError>>()?;
        Ok(TestPlan {
            code_id: code.id.clone(),
            revision: revision.to_string(),
            units,
        })
    }
}

/// One (build, tests) unit of work on one platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanUnit {
    pub code_id: String,
    pub revision: String,
    pub platform: PlatformSpec,
    /// In the code's declaration order.
    pub libraries: Vec<LibrarySpec>,
    pub build_steps: Vec<String>,
    /// Golden paths are already resolved.
    pub tests: Vec<TestSpec>,
    pub timeout_build_s: u64,
    pub timeout_test_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPlan {
    pub code_id: String,
    pub revision: String,
    pub units: Vec<PlanUnit>,
}

impl TestPlan {
    /// Number of individual test executions the plan schedules.
    pub fn test_executions(&self) -> usize {
        self.units.iter().map(|u| u.tests.len()).sum()
    }
}
