use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn graphshot(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphshot")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn train_evaluate_and_tabulate() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.conf");
    fs::write(
        &config,
        "# tiny synthetic run\nsynth_train_classes = 10\nsynth_val_classes = 5\nsynth_test_classes = 5\n\
         synth_dim = 16\nsteps = 4\neval_every = 2\nval_episodes = 5\nepisodes_per_step = 2\n",
    )
    .unwrap();
    stdout(&graphshot(&["train", "--config", "run.conf", "--output-dir", "run"], dir.path()));
    let run = dir.path().join("run");
    for file in ["metrics.csv", "manifest.json", "best.ckpt", "last.ckpt"] {
        assert!(run.join(file).exists(), "{file} missing");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,train-loss,val-accuracy,wall-seconds"));
    assert_eq!(metrics.lines().count(), 3);

    let out = graphshot(
        &["evaluate", "--checkpoint", "run/best.ckpt", "--episodes", "20", "--report", "report.csv"],
        dir.path(),
    );
    stdout(&out);
    let out = stdout(&graphshot(&["tables", "report.csv", "report.csv"], dir.path()));
    assert!(out.contains("accuracy"));
    assert_eq!(out.lines().filter(|l| l.contains("gnn")).count(), 2);
}

#[test]
fn gradcheck_reports_pass_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&graphshot(&["gradcheck", "--module", "gnn"], dir.path()));
    assert!(out.lines().any(|l| l.starts_with("PASS")), "{out}");
    assert!(!out.contains("FAIL"));
    let bad = graphshot(&["gradcheck", "--module", "nope"], dir.path());
    assert!(!bad.status.success());
}

#[test]
fn bad_settings_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = graphshot(&["train", "--set", "steps=banana"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps"));
    let out = graphshot(&["evaluate", "--checkpoint", "missing.ckpt"], dir.path());
    assert!(!out.status.success());
}
