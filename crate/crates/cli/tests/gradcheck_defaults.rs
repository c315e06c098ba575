//! The `gradcheck` command on the full default configuration. Kept in its
//! own target so a failure here does not hide the acceptance report.

use std::process::Command;

#[test]
fn gradcheck_passes_on_defaults() {
    let out = Command::new(env!("CARGO_BIN_EXE_cogr"))
        .arg("gradcheck")
        .output()
        .expect("binary runs");
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert_eq!(text.lines().count(), 2 + 4 * 8);
    assert!(text.lines().all(|l| l.starts_with("pass ")));
}
