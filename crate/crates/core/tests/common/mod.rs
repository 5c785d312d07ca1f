//! Fixture workloads shared by the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use tempfile::TempDir;

/// Shell command printing 50 samples of a sine wave. `{{`/`}}` are template
/// escapes for literal braces.
pub const WAVE_STEP: &str =
    "awk 'BEGIN {{ for (i = 0; i < 50; i++) printf \"%.3f %.17g\\n\", i * 0.1, sin(i * 0.1) }}' > {output}";

/// Same wave with doubled amplitude; fails an l2 comparison.
pub const LOUD_WAVE_STEP: &str =
    "awk 'BEGIN {{ for (i = 0; i < 50; i++) printf \"%.3f %.17g\\n\", i * 0.1, 2 * sin(i * 0.1) }}' > {output}";

pub struct Fixture {
    pub dir: TempDir,
}

impl Fixture {
    pub fn new() -> Self {
        let fx = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::create_dir_all(fx.root().join("golden")).unwrap();
        let golden = fx.root().join("golden/wave.dat");
        let cmd = WAVE_STEP
            .replace("{{", "{")
            .replace("}}", "}")
            .replace("{output}", &sh_quote(&golden));
        let status = Command::new("sh").arg("-c").arg(cmd).status().unwrap();
        assert!(status.success());
        fx
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root().join("manifest.toml")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root().join("data")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root().join("report")
    }

    pub fn write_manifest(&self, text: &str) -> PathBuf {
        let path = self.manifest_path();
        fs::write(&path, text).unwrap();
        path
    }

    pub fn load(&self) -> geoforge::manifest::Manifest {
        geoforge::manifest::load_manifest(&self.manifest_path()).unwrap()
    }

    /// The binary with flags pointing at this fixture.
    pub fn cli(&self) -> Command {
        let mut cmd = bin();
        cmd.arg("--manifest")
            .arg(self.manifest_path())
            .arg("--data-dir")
            .arg(self.data_dir())
            .arg("--report-dir")
            .arg(self.report_dir());
        cmd
    }
}

pub fn sh_quote(path: &Path) -> String {
    format!("'{}'", path.display())
}

/// The geoforge binary with a clean environment.
pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_geoforge"));
    for var in ["GEOFORGE_CONFIG", "GEOFORGE_MANIFEST", "GEOFORGE_DATA_DIR"] {
        cmd.env_remove(var);
    }
    cmd.env("RUST_LOG", "warn");
    cmd
}

/// Platform table entries `p1..pN`; `p2` uses the "legacy" toolchain.
pub fn platforms(n: usize) -> String {
    (1..=n)
        .map(|i| {
            let toolchain = if i == 2 { "legacy" } else { "modern" };
            format!("[[platform]]\nid = \"p{i}\"\nenv = {{ TOOLCHAIN = \"{toolchain}\" }}\n\n")
        })
        .collect()
}

/// A passing wave test plus a failing one.
pub fn wave_tests() -> String {
    format!(
        r#"[[test]]
id = "wave"
run_steps = [{wave:?}]
output_path = "wave.dat"
golden_path = "golden/wave.dat"
comparator = "correlation"

[[test]]
id = "wave_l2"
run_steps = [{wave:?}]
output_path = "wave_l2.dat"
golden_path = "golden/wave.dat"
comparator = "l2"

[[test]]
id = "loud"
run_steps = [{loud:?}]
output_path = "loud.dat"
golden_path = "golden/wave.dat"
comparator = "l2"

"#,
        wave = WAVE_STEP,
        loud = LOUD_WAVE_STEP
    )
}

pub struct CodeDef<'a> {
    pub id: &'a str,
    pub probe: &'a str,
    pub build_steps: &'a [&'a str],
    pub libraries: &'a [&'a str],
    pub platforms: &'a [&'a str],
    pub tests: &'a [&'a str],
}

pub fn code(def: &CodeDef<'_>) -> String {
    let list = |xs: &[&str]| format!("{:?}", xs);
    format!(
        "[[code]]\nid = \"{}\"\nrevision_probe = {:?}\nbuild_steps = {}\nlibraries = {}\nplatforms = {}\ntests = {}\ntimeout_build_s = 30\ntimeout_test_s = 30\n\n",
        def.id,
        def.probe,
        list(def.build_steps),
        list(def.libraries),
        list(def.platforms),
        list(def.tests)
    )
}

/// Build step that fails on the legacy toolchain.
pub const NEEDS_MODERN: &str =
    "if [ \"$TOOLCHAIN\" = legacy ]; then echo 'error: unsupported toolchain' >&2; exit 1; fi";

/// Three codes on three platforms; `c2` fails to build on `p2`.
pub fn gating_manifest() -> String {
    let mut text = platforms(3);
    text.push_str(&wave_tests());
    let all = ["p1", "p2", "p3"];
    for id in ["c1", "c2", "c3"] {
        let steps: &[&str] = if id == "c2" {
            &[NEEDS_MODERN, "echo built > {workdir}/bin"]
        } else {
            &["echo built > {workdir}/bin"]
        };
        text.push_str(&code(&CodeDef {
            id,
            probe: "echo r1",
            build_steps: steps,
            libraries: &[],
            platforms: &all,
            tests: &["wave"],
        }));
    }
    text
}

/// Dashboard sub-cell classes in document order.
pub fn cell_classes(html: &str) -> Vec<String> {
    html.match_indices("<td class=\"")
        .map(|(i, m)| {
            let rest = &html[i + m.len()..];
            rest[..rest.find('"').unwrap()].to_string()
        })
        .collect()
}

pub fn wait_for(what: &str, timeout: Duration, mut cond: impl FnMut() -> bool) {
    let deadline = Instant::now() + timeout;
    while !cond() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(20));
    }
}
