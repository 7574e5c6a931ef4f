use std::process::Command;

fn cascade() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cascade"))
}

fn scenario(name: &str) -> String {
    format!("{}/../../scenarios/{name}.json", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn run_prints_the_table_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = cascade()
        .args(["run", "--trace", &scenario("reference"), "--report"])
        .arg(dir.path().join("r"))
        .arg("--pcm-dir")
        .arg(dir.path().join("pcm"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("917.2"), "{table}");
    assert!(dir.path().join("r/events.log").exists());
    assert!(dir.path().join("pcm/turn-2.wav").exists());
}

#[test]
fn diff_reports_identical_and_divergent_logs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let st = cascade()
            .args(["run", "--trace", &scenario("reference"), "--report"])
            .arg(dir.path().join(name))
            .args(extra)
            .output()
            .unwrap();
        assert!(st.status.success());
        dir.path().join(name).join("events.log")
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    let c = run("c", &["--jitter", "--seed", "9"]);
    let same = cascade().arg("diff").arg(&a).arg(&b).output().unwrap();
    assert!(same.status.success());
    assert!(String::from_utf8_lossy(&same.stdout).contains("identical"));
    let differ = cascade().arg("diff").arg(&a).arg(&c).output().unwrap();
    assert_eq!(differ.status.code(), Some(1));
}

#[test]
fn partial_selection_and_bad_input_exit_cleanly() {
    let ok = cascade().args(["run", "--trace", &scenario("barge_in"), "--stages", "llm+tts+vocoder"]).output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let bad = cascade().args(["run", "--trace", &scenario("reference"), "--stages", "tts"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let missing = cascade().args(["run", "--trace", "/nonexistent.json"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nonexistent"));
}
