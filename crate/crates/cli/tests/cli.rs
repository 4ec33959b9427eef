use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn reroute(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reroute"))
        .args(args)
        .current_dir(cwd)
        .env_remove("REROUTE_DETERMINISTIC")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(out: &str, key: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("{key} missing in {out}"))
}

/// Writes the built-in example config, trimmed to `steps` training steps.
fn write_config(dir: &Path, steps: u64) {
    let o = reroute(&["example-config"], dir);
    assert!(o.status.success());
    let text = stdout(&o).replace("steps = 20", &format!("steps = {steps}"));
    fs::write(dir.join("cfg.toml"), text).unwrap();
}

#[test]
fn help_and_bad_flags() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(reroute(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(reroute(&["train", "--help"], dir.path()).status.code(), Some(0));
    assert_eq!(reroute(&["--no-such-flag"], dir.path()).status.code(), Some(2));
    assert_eq!(reroute(&["train"], dir.path()).status.code(), Some(2));
}

#[test]
fn train_writes_artifacts_and_eval_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_config(p, 10);
    let o = reroute(&["train", "--config", "cfg.toml", "--out", "run"], p);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run = p.join("run");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() > 1, "metrics has data rows");
    for f in ["checkpoint.rrt", "policy.csv", "routes.jsonl", "summary.json", "config.toml"] {
        assert!(run.join(f).is_file(), "{f} written");
    }
    let train_acc = value(&stdout(&o), "accuracy");

    // The example config validates on toy images with 5 per class and seed 0 + 1.
    let o = reroute(
        &["data", "make-toy", "--per-class", "5", "--seed", "1", "--output", "val.rimg"],
        p,
    );
    assert!(o.status.success());
    let o = reroute(
        &["eval", "--checkpoint", "run/checkpoint.rrt", "--data", "val.rimg", "--routes", "r.jsonl"],
        p,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(value(&stdout(&o), "accuracy"), train_acc);
    assert_eq!(fs::read_to_string(p.join("r.jsonl")).unwrap().lines().count(), 50);
    assert_eq!(
        fs::read_to_string(p.join("r.jsonl")).unwrap(),
        fs::read_to_string(run.join("routes.jsonl")).unwrap(),
    );

    let ran = reroute(&["routes", "neighbors", "--routes", "r.jsonl", "--image-id", "0", "--top", "3"], p);
    assert!(ran.status.success());
    assert_eq!(stdout(&ran).lines().count(), 3);
    for sub in [&["routes", "std", "--routes", "r.jsonl"][..], &["routes", "separation", "--routes", "r.jsonl"], &["routes", "policy", "--routes", "r.jsonl"]] {
        assert!(reroute(sub, p).status.success(), "{sub:?}");
    }
}

#[test]
fn eval_rerun_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_config(p, 3);
    assert!(reroute(&["train", "--config", "cfg.toml", "--out", "run"], p).status.success());
    assert!(reroute(&["data", "make-toy", "--per-class", "3", "--output", "v.rimg"], p).status.success());
    let args = ["eval", "--checkpoint", "run/checkpoint.rrt", "--data", "v.rimg"];
    let a = stdout(&reroute(&args, p));
    let b = stdout(&reroute(&args, p));
    assert_eq!(a, b);
    assert!(a.contains("relative_time"));
}

#[test]
fn resume_continues_the_step_counter() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_config(p, 12);
    let full = reroute(&["train", "--config", "cfg.toml", "--out", "full"], p);
    assert!(full.status.success());
    let first = reroute(&["train", "--config", "cfg.toml", "--out", "split", "--stop-after", "5"], p);
    assert!(first.status.success());
    assert_eq!(value(&stdout(&first), "step"), 5.0);
    let second = reroute(
        &["train", "--config", "cfg.toml", "--out", "split", "--resume", "split/checkpoint.rrt"],
        p,
    );
    assert_eq!(second.status.code(), Some(0), "{}", String::from_utf8_lossy(&second.stderr));
    assert_eq!(value(&stdout(&second), "step"), 12.0);
    let a = fs::read_to_string(p.join("full/metrics.csv")).unwrap();
    let b = fs::read_to_string(p.join("split/metrics.csv")).unwrap();
    assert_eq!(a, b, "resumed run reproduces the uninterrupted metrics");
}

#[test]
fn missing_or_corrupt_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_config(p, 1);
    let text = fs::read_to_string(p.join("cfg.toml")).unwrap();
    let cifar = text.replace(
        "kind = \"toy\"\nclasses = 10\nper_class = 20\nval_per_class = 5\nseed = 0",
        "kind = \"cifar10\"\ndir = \"no/such/dir\"",
    );
    assert_ne!(cifar, text);
    fs::write(p.join("cifar.toml"), cifar).unwrap();
    assert_eq!(reroute(&["train", "--config", "cifar.toml"], p).status.code(), Some(2));
    assert_eq!(reroute(&["train", "--config", "absent.toml"], p).status.code(), Some(2));

    fs::write(p.join("bad.toml"), text.replace("schema_version = 1", "schema_version = 7")).unwrap();
    assert_eq!(reroute(&["train", "--config", "bad.toml"], p).status.code(), Some(2));

    assert!(reroute(&["data", "make-toy", "--per-class", "1", "--output", "v.rimg"], p).status.success());
    fs::write(p.join("bad.rrt"), b"JUNKJUNKJUNK").unwrap();
    let o = reroute(&["eval", "--checkpoint", "bad.rrt", "--data", "v.rimg"], p);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("offset 0"));

    let mut raw = fs::read(p.join("v.rimg")).unwrap();
    raw.truncate(raw.len() - 10);
    fs::write(p.join("short.rimg"), raw).unwrap();
    assert_eq!(reroute(&["data", "inspect", "short.rimg"], p).status.code(), Some(2));
}

#[test]
fn data_tools_are_deterministic_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for name in ["a.rimg", "b.rimg"] {
        assert!(reroute(&["data", "make-toy", "--per-class", "4", "--seed", "9", "--output", name], p).status.success());
    }
    assert_eq!(fs::read(p.join("a.rimg")).unwrap(), fs::read(p.join("b.rimg")).unwrap());

    // A full CIFAR-style batch file: label byte followed by 3072 pixel bytes.
    let mut batch = Vec::new();
    for i in 0..10_000u32 {
        batch.push((i % 10) as u8);
        batch.extend((0..3072u32).map(|j| ((i * 7 + j) % 256) as u8));
    }
    fs::write(p.join("batch.bin"), &batch).unwrap();
    let o = reroute(&["data", "inspect", "batch.bin"], p);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("10000 records, 10 classes"));
    assert!(reroute(&["data", "convert", "--input", "batch.bin", "--output", "c.rimg"], p).status.success());
    let raw = fs::read(p.join("c.rimg")).unwrap();
    assert_eq!(&raw[..4], b"RIMG");
    assert_eq!(&raw[16..], &batch[..], "records survive conversion byte for byte");
    batch.pop();
    fs::write(p.join("short.bin"), &batch).unwrap();
    assert_eq!(reroute(&["data", "inspect", "short.bin"], p).status.code(), Some(2));
}

#[test]
fn describe_prints_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = reroute(&["model", "describe", "--arch", "reset38"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    for s in ["stem", "stage0", "stage1", "stage2", "head", "30517578125"] {
        assert!(text.contains(s), "{s} in {text}");
    }
    assert_eq!(reroute(&["model", "describe", "--arch", "vgg"], dir.path()).status.code(), Some(2));
}

#[test]
fn deterministic_mode_reproduces_a_stored_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_config(p, 4);
    let run = |out: &str, cfg: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_reroute"))
            .args(["train", "--config", cfg, "--out", out, "--threads", "4"])
            .current_dir(p)
            .env("REROUTE_DETERMINISTIC", "1")
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(p.join(out).join("metrics.csv")).unwrap()
    };
    let first = run("a", "cfg.toml");
    // the config stored next to the artifacts replays the run
    let again = run("b", "a/config.toml");
    assert_eq!(first, again);
}
