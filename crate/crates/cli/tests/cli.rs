//! Exit codes and outputs of the `fieldrecon` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{"data":{"synthetic":{"snapshots_per_condition":10}},"split":{"last_n":2},
    "methods":["gappy_pod","sparse_pod"],"k_list":[2],"p_list":[8],"conditions":[15,45],
    "trials":2,"seed":9,"noise":{"gaussian_sigma":0.05}}"#;

fn fieldrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fieldrecon"))
        .args(args)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn sweep_writes_selected_format() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", CONFIG);
    let out = dir.path().join("out");
    let o = fieldrecon(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("records.csv").exists());
    assert!(out.join("manifest.json").exists());
    assert!(!out.join("report.json").exists());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("8 records, 0 skipped cells"), "{stdout}");
}

#[test]
fn validate_reports_plan() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", CONFIG);
    let o = fieldrecon(&["validate", "--config", &cfg]);
    assert!(o.status.success());
    assert!(String::from_utf8(o.stdout)
        .unwrap()
        .contains("planned records: 8"));
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"methods":["gappy_pod"],"bogus":true}"#,
    );
    let o = fieldrecon(&["sweep", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("error:"));
}

#[test]
fn malformed_snapshot_file_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let gen = write(dir.path(), "gen.json", CONFIG);
    let data = dir.path().join("data");
    let o = fieldrecon(&[
        "gen-data",
        "--config",
        &gen,
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success());

    // drop a value from the first row so the row no longer matches the grid
    let snaps = data.join("snapshots_15m.csv");
    let text = fs::read_to_string(&snaps).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let cut = lines[1].rfind(',').unwrap();
    lines[1].truncate(cut);
    fs::write(&snaps, lines.join("\n") + "\n").unwrap();

    let cfg = CONFIG.replace(
        r#"{"synthetic":{"snapshots_per_condition":10}}"#,
        r#"{"files":{"grid":"data/grid.json","snapshots":["data/snapshots_15m.csv","data/snapshots_45m.csv"]}}"#,
    );
    let cfg = write(dir.path(), "files.json", &cfg);
    let o = fieldrecon(&["validate", "--config", &cfg]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn missing_config_file_exits_with_one() {
    let o = fieldrecon(&["validate", "--config", "/nonexistent/fieldrecon.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn shipped_synthetic_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["sweep.json", "fixed.json", "corruption.json"] {
        let path = root.join(name);
        let o = fieldrecon(&["validate", "--config", path.to_str().unwrap()]);
        assert!(
            o.status.success(),
            "{name}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}
