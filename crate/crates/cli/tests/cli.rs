use std::path::Path;
use std::process::{Command, Output};

const CASE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/examples/casestudy.cfg");

fn btgp(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_btgp"))
        .args(["--config", CASE, "--out"])
        .arg(out)
        .args([
            "-q",
            "4",
            "--set",
            "data.samples=300",
            "--set",
            "verify.target_lower=[-5.0, -5.0]",
            "--set",
            "verify.target_upper=[5.0, 5.0]",
        ])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn staged_commands_match_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let (staged, full) = (dir.path().join("staged"), dir.path().join("full"));
    for cmd in ["simulate", "fit", "bound", "abstract", "verify"] {
        ok(&btgp(&staged, &[cmd]));
    }
    let out = ok(&btgp(&full, &["run"]));
    assert!(out.contains("verify") && out.contains("s_init="), "{out}");
    let read = |d: &Path| std::fs::read_to_string(d.join("certificate.json")).unwrap();
    assert_eq!(read(&staged), read(&full));

    std::fs::remove_file(staged.join("v_max.csv")).unwrap();
    ok(&btgp(&staged, &["export", "--which", "v_max"]));
    assert_eq!(
        std::fs::read(staged.join("v_max.csv")).unwrap(),
        std::fs::read(full.join("v_max.csv")).unwrap()
    );
    let pgm = std::fs::read(staged.join("v_max.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = btgp(dir.path(), &["--set", "errbound.delta=1.5", "run"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("delta"));

    let unknown = btgp(dir.path(), &["--set", "model.colour=1", "run"]);
    assert_eq!(unknown.status.code(), Some(2));

    let capped = btgp(dir.path(), &["--set", "verify.max_iters=1", "run"]);
    assert_eq!(capped.status.code(), Some(3), "{}", String::from_utf8_lossy(&capped.stdout));
    assert!(dir.path().join("certificate.json").exists());

    let missing = btgp(&dir.path().join("empty"), &["verify"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("stage `verify` failed"));
}
