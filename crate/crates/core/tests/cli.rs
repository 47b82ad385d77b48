use std::process::{Command, Output};

fn gur(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gur"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("spawn gur")
}

#[test]
fn version_includes_build_hash() {
    let out = gur(&["--version"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.contains(env!("CARGO_PKG_VERSION")) && text.contains("(build "),
        "{text}"
    );
}

#[test]
fn bad_flags_exit_2_with_usage() {
    for args in [
        &["mine", "--bogus"][..],
        &["train"],
        &["frobnicate"],
        &["--threads", "0", "selftest"],
    ] {
        let out = gur(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn runtime_failure_exits_1_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = gur(&[
        "represent",
        "--model",
        missing.to_str().unwrap(),
        "--input",
        "x",
        "--out",
        "y",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
}

#[test]
fn selftest_passes() {
    let out = gur(&["--deterministic", "--threads", "1", "selftest"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}
