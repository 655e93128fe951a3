//! The `landau` binary: exit codes, manifests and the artifact pipeline on a
//! reduced configuration.

use landau_hilbert::harness::{read_checks, read_sweep, EXIT_CONFIG, EXIT_PREREQUISITE};
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 11

[momentum]
points_per_axis = 8

[space]
cells = 8

[checks]
kernel_pairs = 500
coercivity_samples = 40
roundtrip_samples = 8
coercivity_points = 10

[euler]
t_final = 0.1
output_every = 0.05

[hilbert]
snapshot_dt = 0.025

[solver]
t_final = 0.1
dt = 0.025

[sweep]
epsilons = [0.1, 0.05, 0.025]
dt_halving = true
"#;

fn landau(dir: &Path, config: Option<&str>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_landau"));
    if let Some(text) = config {
        let path = dir.join("input.toml");
        std::fs::write(&path, text).unwrap();
        cmd.arg("--config").arg(path);
    }
    cmd.arg("--output").arg(dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = landau(dir.path(), Some("[momentum]\nradius = 3.5\nspacing = 0.1\n"), &["check-kernel"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG), "{}", stderr(&o));
    assert!(stderr(&o).contains("spacing"));
}

#[test]
fn invalid_value_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = landau(dir.path(), Some("[momentum]\npoints_per_axis = 7\n"), &["euler-solve"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = landau(dir.path(), None, &["sweep"]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn sweep_without_backbone_is_a_missing_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let o = landau(dir.path(), Some(SMALL), &["knudsen-sweep"]);
    assert_eq!(o.status.code(), Some(EXIT_PREREQUISITE));
    assert!(stderr(&o).contains("hilbert-build"), "{}", stderr(&o));
    let o = landau(dir.path(), Some(SMALL), &["report"]);
    assert_eq!(o.status.code(), Some(EXIT_PREREQUISITE));
    assert!(stderr(&o).contains("knudsen-sweep"), "{}", stderr(&o));
}

#[test]
fn check_kernel_on_defaults_succeeds_and_is_reproducible() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let o = landau(d.path(), None, &["check-kernel"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    for f in ["kernel_checks.csv", "summary.md", "manifest-check-kernel.toml"] {
        assert_eq!(read(&dirs[0], f), read(&dirs[1], f), "{f}");
    }
    let checks = read_checks(&dirs[0].path().join("kernel_checks.csv")).unwrap();
    assert!(checks.iter().all(|c| c.pass), "{checks:?}");
    assert_eq!(checks.iter().filter(|c| c.criterion == 3).count(), 5);
}

#[test]
fn pipeline_writes_every_artifact_and_lists_it() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for cmd in ["check-linearized", "euler-solve", "hilbert-build", "knudsen-sweep", "report"] {
        let o = landau(d, Some(SMALL), &[cmd]);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
        let manifest: toml::Table = toml::from_str(&std::fs::read_to_string(d.join(format!("manifest-{cmd}.toml"))).unwrap()).unwrap();
        assert_eq!(manifest["subcommand"].as_str(), Some(cmd));
        assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
        for f in manifest["outputs"].as_array().unwrap() {
            assert!(d.join(f.as_str().unwrap()).exists(), "{cmd} lists missing {f}");
        }
    }
    let sweep_manifest = std::fs::read_to_string(d.join("manifest-knudsen-sweep.toml")).unwrap();
    for f in [
        "sweep_result.csv",
        "sweep_runs.csv",
        "sweep_checks.csv",
        "slope.txt",
        "convergence.svg",
        "energy.svg",
        "dissipation.svg",
    ] {
        assert!(sweep_manifest.contains(f), "{f}");
    }
    let rows = read_sweep(&d.join("sweep_result.csv")).unwrap();
    let eps: std::collections::BTreeSet<String> = rows.iter().map(|r| r.epsilon.to_string()).collect();
    assert_eq!(eps.len(), 3);
    assert!(rows.iter().all(|r| r.h2_norm.is_finite() && r.e > 0.0));

    let header = std::fs::read_to_string(d.join("fluid.csv")).unwrap();
    assert!(header.starts_with("t,x,n0,u1,u2,u3,T0\n"));
    let summary = std::fs::read_to_string(d.join("summary.md")).unwrap();
    for line in ["| 4. linearized structure |", "| 6. Hilbert hierarchy |", "| 9. positivity |", "fitted log-log slope"] {
        assert!(summary.contains(line), "{line}\n{summary}");
    }

    // report only re-renders: same plots, same slope
    let before: Vec<Vec<u8>> = ["convergence.svg", "slope.txt"].iter().map(|f| std::fs::read(d.join(f)).unwrap()).collect();
    let o = landau(d, Some(SMALL), &["report"]);
    assert_eq!(o.status.code(), Some(0));
    let after: Vec<Vec<u8>> = ["convergence.svg", "slope.txt"].iter().map(|f| std::fs::read(d.join(f)).unwrap()).collect();
    assert_eq!(before, after);

    // a changed backbone section invalidates the stored backbone
    let changed = SMALL.replace("[euler]\n", "[euler]\namplitude = 2e-3\n");
    let o = landau(d, Some(&changed), &["knudsen-sweep"]);
    assert_eq!(o.status.code(), Some(EXIT_PREREQUISITE), "{}", stderr(&o));
}
