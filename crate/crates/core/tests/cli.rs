use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# three classes of 8x8 images, two clients
synth_classes = 3
synth_per_class = 8
synth_test_per_class = 4
synth_side = 8
clients = 2
per_class_per_client = 4
rounds = 2
time_steps = 4
";

fn fedsnn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsnn"))
        .args(args)
        .current_dir(dir)
        .env_remove("FEDSNN_SEED")
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

#[test]
fn train_writes_all_artifacts_and_reruns_identically() {
    let dir = setup();
    let d = dir.path();
    for out in ["a", "b"] {
        let o = fedsnn(&["train", "--config", "tiny.cfg", "--out", out], d);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["metrics.csv", "energy.csv", "model.ckpt", "config.resolved"] {
        let (a, b) = (fs::read(d.join("a").join(file)).unwrap(), fs::read(d.join("b").join(file)).unwrap());
        assert_eq!(a, b, "{file} differs between runs");
    }
    let metrics = fs::read_to_string(d.join("a/metrics.csv")).unwrap();
    assert!(metrics.starts_with("round,test_acc,mean_train_loss,selected_clients,wall_ms,spike_rate_l1,"));
    assert_eq!(metrics.lines().count(), 4);
    // the resolved config is itself a valid config reproducing the run
    let o = fedsnn(&["train", "--config", "a/config.resolved", "--out", "c"], d);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(d.join("c/metrics.csv")).unwrap(), metrics.as_bytes());
    let leftovers: Vec<_> = fs::read_dir(d.join("a")).unwrap().filter_map(|e| e.ok()).filter(|e| e.file_name().to_string_lossy().ends_with(".tmp")).collect();
    assert!(leftovers.is_empty());
}

#[test]
fn seed_variable_overrides_config() {
    let dir = setup();
    let d = dir.path();
    fedsnn(&["train", "--config", "tiny.cfg", "--out", "plain"], d);
    let o = Command::new(env!("CARGO_BIN_EXE_fedsnn"))
        .args(["train", "--config", "tiny.cfg", "--out", "seeded"])
        .current_dir(d)
        .env("FEDSNN_SEED", "77")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let resolved = fs::read_to_string(d.join("seeded/config.resolved")).unwrap();
    assert!(resolved.lines().any(|l| l == "seed = 77"));
    assert_ne!(fs::read(d.join("plain/model.ckpt")).unwrap(), fs::read(d.join("seeded/model.ckpt")).unwrap());
    let bad = Command::new(env!("CARGO_BIN_EXE_fedsnn"))
        .args(["train", "--config", "tiny.cfg", "--out", "x"])
        .current_dir(d)
        .env("FEDSNN_SEED", "minus one")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn failures_leave_no_outputs() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("missing_data.cfg"), format!("{TINY}data_path = nowhere.fds\ntest_path = nowhere.fds\n")).unwrap();
    fs::write(d.join("typo.cfg"), "lamda = 0.5\n").unwrap();
    fs::write(d.join("range.cfg"), "lambda = 1.5\n").unwrap();
    fs::write(d.join("garbage.fds"), b"FDS1\x01").unwrap();
    fs::write(d.join("broken_data.cfg"), format!("{TINY}data_path = garbage.fds\ntest_path = garbage.fds\n")).unwrap();
    for (cfg, code) in [
        ("missing_data.cfg", 1),
        ("typo.cfg", 1),
        ("range.cfg", 1),
        ("absent.cfg", 1),
        ("broken_data.cfg", 2),
    ] {
        let o = fedsnn(&["train", "--config", cfg, "--out", "out"], d);
        assert_eq!(o.status.code(), Some(code), "{cfg}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!d.join("out").exists(), "{cfg} left outputs");
    }
    let o = fedsnn(&["train", "--config", "tiny.cfg"], d);
    assert_eq!(o.status.code(), Some(1));
    let o = fedsnn(&["sweep", "--config", "tiny.cfg", "--axis", "gamma", "--values", "1", "--out", "out"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(!d.join("out").exists());
}

#[test]
fn single_value_sweep_matches_train() {
    let dir = setup();
    let d = dir.path();
    fedsnn(&["train", "--config", "tiny.cfg", "--out", "t"], d);
    let o = fedsnn(&["sweep", "--config", "tiny.cfg", "--axis", "alpha", "--values", "0.3", "--out", "s"], d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = fs::read_to_string(d.join("s/sweep.csv")).unwrap();
    let train = fs::read_to_string(d.join("t/metrics.csv")).unwrap();
    let mut lines = sweep.lines();
    assert_eq!(lines.next().unwrap(), format!("sweep_value,{}", train.lines().next().unwrap()));
    for (s, t) in lines.zip(train.lines().skip(1)) {
        assert_eq!(s, format!("0.3,{t}"));
    }
    assert!(d.join("s/alpha_0.3/model.ckpt").exists());
}

#[test]
fn parallel_sweep_equals_sequential() {
    let dir = setup();
    let d = dir.path();
    let args = ["sweep", "--config", "tiny.cfg", "--axis", "noise", "--values", "0,0.2", "--out"];
    let seq = fedsnn(&[&args[..], &["seq"]].concat(), d);
    let par = fedsnn(&[&args[..], &["par", "--parallel"]].concat(), d);
    assert_eq!((seq.status.code(), par.status.code()), (Some(0), Some(0)));
    let csv = fs::read_to_string(d.join("seq/sweep.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(d.join("par/sweep.csv")).unwrap());
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
}

#[test]
fn energy_and_synth_commands() {
    let dir = setup();
    let d = dir.path();
    fedsnn(&["train", "--config", "tiny.cfg", "--out", "t"], d);
    let o = fedsnn(&["synth", "--classes", "3", "--per-class", "4", "--side", "8", "--out", "d.fds"], d);
    assert_eq!(o.status.code(), Some(0));
    let e1 = fedsnn(&["energy", "--ckpt", "t/model.ckpt", "--data", "d.fds", "--out", "e1"], d);
    let e2 = fedsnn(&["energy", "--ckpt", "t/model.ckpt", "--data", "d.fds", "--out", "e2"], d);
    assert_eq!((e1.status.code(), e2.status.code()), (Some(0), Some(0)));
    assert_eq!(fs::read(d.join("e1/energy.csv")).unwrap(), fs::read(d.join("e2/energy.csv")).unwrap());
    let o = fedsnn(&["energy", "--ckpt", "t/model.ckpt", "--data", "d.fds", "--out", "r", "--reference-rates"], d);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("ap1") && l.contains("exempt")));
    let o = fedsnn(&["energy", "--ckpt", "nothing.ckpt", "--data", "d.fds", "--out", "n"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.join("n").exists());
}
