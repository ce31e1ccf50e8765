use std::process::Command;

fn itl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_itl")).args(args).output().unwrap()
}

#[test]
fn help_and_usage_errors() {
    let h = itl(&["--help"]);
    assert_eq!(h.status.code(), Some(0));
    let text = String::from_utf8_lossy(&h.stdout);
    for sub in ["gen-data", "train-uda", "induce", "run-experiment"] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
    assert_eq!(itl(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(itl(&["train-sd", "--seed", "x"]).status.code(), Some(1));
}

#[test]
fn missing_data_is_a_runtime_error() {
    let o = itl(&["train-sd", "--data-dir", "/nonexistent/itl-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}
