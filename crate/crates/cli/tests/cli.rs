use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios")
}

fn gem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gem")).args(args).env_remove("GEM_CONFIG").output().expect("gem runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

struct ThreeWeeks {
    dir: tempfile::TempDir,
    workload: PathBuf,
    config: PathBuf,
}

impl ThreeWeeks {
    fn new() -> Self {
        let s = scenarios();
        Self { dir: tempfile::tempdir().unwrap(), workload: s.join("three_weeks.workload"), config: s.join("three_weeks.toml") }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn replay(&self, system: &str, out: &Path) -> Output {
        gem(&[
            "replay",
            "--workload",
            path(&self.workload),
            "--config",
            path(&self.config),
            "--journal-out",
            path(out),
            "--system",
            system,
        ])
    }
}

#[test]
fn scenario_replay_passes_and_is_deterministic() {
    let f = ThreeWeeks::new();
    let (a, b) = (f.file("a.gemj"), f.file("b.gemj"));
    let o = f.replay("gem", &a);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("-> [\"April 20\"]"));
    assert_eq!(f.replay("gem", &b).status.code(), Some(0));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn failing_assert_names_its_line() {
    let f = ThreeWeeks::new();
    let o = f.replay("baseline", &f.file("b.gemj"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("assert failed at line 21"), "{}", stdout(&o));
}

#[test]
fn audit_passes_gem_and_fails_baseline() {
    let f = ThreeWeeks::new();
    let (g, b) = (f.file("g.gemj"), f.file("b.gemj"));
    f.replay("gem", &g);
    f.replay("baseline", &b);
    let o = gem(&["audit", "--journal", path(&g), "--probes", path(&f.workload)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "PASS C1\u{2013}C6: 0 violations\n");

    let o = gem(&["audit", "--journal", path(&b), "--probes", path(&f.workload)]);
    assert_eq!(o.status.code(), Some(1));
    let head = stdout(&o).lines().next().unwrap().to_string();
    assert!(head.starts_with("FAIL"), "{head}");
    assert!(head.contains("C6 3"), "{head}");

    let o = gem(&["audit", "--journal", path(&b), "--probes", path(&f.workload), "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!v["c1"].as_array().unwrap().is_empty());
    assert!(!v["c5"].as_array().unwrap().is_empty());
}

#[test]
fn missing_files_are_usage_errors() {
    let o = gem(&["audit", "--journal", "/definitely/not/here.gemj"]);
    assert_eq!(o.status.code(), Some(2));
    let o = gem(&["replay", "--workload", "/definitely/not/here.workload"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(gem(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn config_falls_back_to_env() {
    let f = ThreeWeeks::new();
    let out = f.file("env.gemj");
    let o = Command::new(env!("CARGO_BIN_EXE_gem"))
        .args(["replay", "--workload", path(&f.workload), "--journal-out", path(&out)])
        .env("GEM_CONFIG", &f.config)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let explicit = f.file("explicit.gemj");
    f.replay("gem", &explicit);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&explicit).unwrap());
}

#[test]
fn compare_emits_fixed_csv() {
    let f = ThreeWeeks::new();
    let csv = f.file("cmp.csv");
    let o = gem(&["compare", "--workload", path(&f.workload), "--config", path(&f.config), "--csv-out", path(&csv)]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("system,tick,footprint,stale_answers,lost_answers,salience_delta_sum"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    let gem_rows: Vec<_> = rows.iter().filter(|r| r[0] == "gem").collect();
    let base_rows: Vec<_> = rows.iter().filter(|r| r[0] == "baseline").collect();
    assert!(gem_rows.iter().all(|r| r[4] == "0"));
    // the week-2 query: the baseline has evicted the deadline
    assert_eq!(base_rows[2][4], "1");
    assert!(base_rows.iter().all(|r| r[2].parse::<usize>().unwrap() <= 5));

    let again = f.file("cmp2.csv");
    gem(&["compare", "--workload", path(&f.workload), "--config", path(&f.config), "--csv-out", path(&again)]);
    assert_eq!(std::fs::read(&csv).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn compare_on_empty_workload_is_header_only() {
    let f = ThreeWeeks::new();
    let empty = f.file("empty.workload");
    std::fs::write(&empty, "# nothing\n").unwrap();
    let o = gem(&["compare", "--workload", path(&empty)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "system,tick,footprint,stale_answers,lost_answers,salience_delta_sum\n");
}

#[test]
fn snapshot_restore_round_trip_and_truncation() {
    let f = ThreeWeeks::new();
    let (j, snap) = (f.file("g.gemj"), f.file("g.snap"));
    let replayed = stdout(&f.replay("gem", &j));
    let digest = replayed.lines().last().unwrap().to_string();
    let o = gem(&["snapshot", "--in", path(&j), "--out", path(&snap)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), digest);

    let dump = f.file("state.json");
    let o = gem(&["restore", "--in", path(&snap), "--out", path(&dump)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().last().unwrap(), digest);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&dump).unwrap()).unwrap();
    assert!(v.get("gem").is_some());

    let bytes = std::fs::read(&snap).unwrap();
    let cut = f.file("cut.snap");
    std::fs::write(&cut, &bytes[..bytes.len() - 10]).unwrap();
    let o = gem(&["restore", "--in", path(&cut)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("corrupt snapshot"));
}

#[test]
fn genesis_snapshot_has_versioned_header() {
    let f = ThreeWeeks::new();
    let empty = f.file("empty.workload");
    std::fs::write(&empty, "").unwrap();
    let (j, snap) = (f.file("e.gemj"), f.file("e.snap"));
    assert_eq!(gem(&["replay", "--workload", path(&empty), "--journal-out", path(&j)]).status.code(), Some(0));
    assert_eq!(gem(&["snapshot", "--in", path(&j), "--out", path(&snap)]).status.code(), Some(0));
    let bytes = std::fs::read(&snap).unwrap();
    assert_eq!(&bytes[..4], b"GEMS");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), 16 + len + 32);
}
