use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 6] = [
    "--set",
    "data.train_per_class=12",
    "--set",
    "data.test_per_class=4",
    "--set",
    "teacher_train.epochs=1",
];

fn sokd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sokd"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run sokd")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn with_small(args: &[&'static str]) -> Vec<&'static str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&SMALL);
    v
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sokd(&["gen-data", "--set", "data.nope=1"], dir.path());
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invalid_config_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sokd(&["distill", "--set", "schedule.batch_size=0"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sokd(&["distill", "--set", "data_dir=\"absent\""], dir.path());
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_teacher_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&sokd(&with_small(&["gen-data"]), dir.path())), 0);
    let out = sokd(&with_small(&["distill"]), dir.path());
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let mut args = with_small(&["gen-data", "--out"]);
        args.insert(2, out);
        assert_eq!(code(&sokd(&args, dir.path())), 0);
    }
    let mut names: Vec<_> = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        assert_eq!(
            fs::read(dir.path().join("a").join(&n)).unwrap(),
            fs::read(dir.path().join("b").join(&n)).unwrap()
        );
    }
}

#[test]
fn grad_check_passes_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = sokd(&["grad-check", "--out", "gc", "--set", "oracle.grad_graphs=10"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("gc/grad_check.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&'static str]| {
        let mut v = with_small(args);
        v.extend_from_slice(&["--set", "schedule.epochs=2", "--set", "schedule.search_epochs=1"]);
        let out = sokd(&v, d);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["gen-data"]);
    assert!(run(&["train-teacher"]).contains("teacher test top-1"));
    run(&["distill", "--out", "runs/sokd"]);
    run(&["distill", "--out", "runs/base", "--set", "mode=\"baseline\""]);
    for f in ["metrics.csv", "policy.json", "policy_discrete.json", "areas.csv", "ks.csv", "config.json"] {
        assert!(d.join("runs/sokd").join(f).is_file(), "{f}");
    }
    assert!(!d.join("runs/base/policy.json").exists());

    let acc: f32 = run(&["eval", "--out", "runs/sokd"]).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    run(&["search", "--out", "runs/search"]);
    assert!(run(&["policy-oracle", "--out", "oracle"]).starts_with("rank,candidate,l_aug"));

    let table = run(&["report", "--out", "runs"]);
    assert!(table.contains("mean(sokd)") && table.contains("mean(baseline)"), "{table}");
    assert!(d.join("runs/report.json").is_file());
}
