use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_labes");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn labes(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env_remove("LABES_DATA")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let o = labes(args, cwd);
    assert!(
        o.status.success(),
        "labes {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn workdir() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let spec = fixture("synth.toml");
    ok(&["synth", "--out", "data", "--spec", spec.to_str().unwrap()], dir.path());
    dir
}

fn train(dir: &Path, out: &str, mode: &str, extra: &[&str]) -> String {
    let cfg = fixture("tiny.toml");
    let mut args = vec!["train", "--mode", mode, "--config", cfg.to_str().unwrap(), "--data", "data", "--out", out];
    args.extend_from_slice(extra);
    ok(&args, dir)
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn semi_without_unlabeled_dialogs_matches_sup() {
    let dir = workdir();
    let d = dir.path();
    train(d, "sup", "sup", &[]);
    train(d, "semi", "semi", &["--label-fraction", "1.0"]);
    assert_eq!(read(d.join("sup/best.ckpt")), read(d.join("semi/best.ckpt")));
    assert_eq!(read(d.join("sup/metrics.jsonl")), read(d.join("semi/metrics.jsonl")));
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let dir = workdir();
    let d = dir.path();
    let args = ["--label-fraction", "0.5"];
    train(d, "full", "semi", &args);
    let mut first = args.to_vec();
    first.extend(["--stop-after-epochs", "3"]);
    let stdout = train(d, "part", "semi", &first);
    assert!(stdout.contains("stopped after 3 epochs"));
    assert!(!d.join("part/best.ckpt").exists());
    let m: serde_json::Value = serde_json::from_slice(&read(d.join("part/manifest.json"))).unwrap();
    assert_eq!(m["status"], "interrupted");
    ok(&["train", "--resume", "part"], d);
    for f in ["best.ckpt", "last.ckpt", "state.ckpt", "metrics.jsonl"] {
        assert_eq!(read(d.join("full").join(f)), read(d.join("part").join(f)), "{f}");
    }
    let m: serde_json::Value = serde_json::from_slice(&read(d.join("part/manifest.json"))).unwrap();
    assert_eq!(m["status"], "completed");
    assert_eq!(m["config"]["run"]["train"]["label_fraction"], 0.5);
    assert_eq!(m["config"]["run"]["train"]["patience"], 4);
}

#[test]
fn manifest_replay_reproduces_training() {
    let dir = workdir();
    let d = dir.path();
    train(d, "a", "self", &["--label-fraction", "0.5", "--max-epochs", "2"]);
    ok(&["train", "--manifest", "a/manifest.json", "--out", "b"], d);
    assert_eq!(read(d.join("a/best.ckpt")), read(d.join("b/best.ckpt")));
}

#[test]
fn resume_rejects_changed_inputs() {
    let dir = workdir();
    let d = dir.path();
    train(d, "part", "sup", &["--stop-after-epochs", "1"]);
    let dev = d.join("data/dev.json");
    let mut text = read(&dev);
    text.push(b'\n');
    std::fs::write(&dev, text).unwrap();
    let o = labes(&["train", "--resume", "part"], d);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("changed"));
}

#[test]
fn eval_is_deterministic_and_consistent() {
    let dir = workdir();
    let d = dir.path();
    train(d, "run", "sup", &[]);
    let before: Vec<Vec<u8>> = ["data/test.json", "data/db.json", "run/best.ckpt"].iter().map(|p| read(d.join(p))).collect();
    ok(&["eval", "--checkpoint", "run/best.ckpt", "--data", "data", "--out", "e1"], d);
    ok(&["eval", "--checkpoint", "run/best.ckpt", "--data", "data", "--out", "e2"], d);
    ok(&["eval", "--manifest", "e1/manifest.json", "--out", "e3"], d);
    for f in ["report.json", "decodes.jsonl", "report.txt"] {
        assert_eq!(read(d.join("e1").join(f)), read(d.join("e2").join(f)));
        assert_eq!(read(d.join("e1").join(f)), read(d.join("e3").join(f)));
    }
    let after: Vec<Vec<u8>> = ["data/test.json", "data/db.json", "run/best.ckpt"].iter().map(|p| read(d.join(p))).collect();
    assert_eq!(before, after);

    let r: serde_json::Value = serde_json::from_slice(&read(d.join("e1/report.json"))).unwrap();
    let f = |k: &str| r[k].as_f64().unwrap();
    assert!((f("combined") - ((f("inform") + f("success")) * 0.5 + f("bleu"))).abs() < 1e-12);
    assert_eq!(r["dialogs"], 6);
    let lines = String::from_utf8(read(d.join("e1/decodes.jsonl"))).unwrap();
    assert_eq!(lines.lines().count(), r["turns"].as_u64().unwrap() as usize);
}

#[test]
fn eval_refuses_to_write_into_inputs() {
    let dir = workdir();
    let d = dir.path();
    train(d, "run", "sup", &["--max-epochs", "1"]);
    let o = labes(&["eval", "--checkpoint", "run/best.ckpt", "--data", "data", "--out", "run"], d);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_reports_schema_mismatch() {
    let dir = workdir();
    let d = dir.path();
    train(d, "run", "sup", &["--max-epochs", "1"]);
    std::fs::write(d.join("three.toml"), "slots = 3\ndialogs = 20\n").unwrap();
    ok(&["synth", "--spec", "three.toml", "--out", "other"], d);
    let o = labes(&["eval", "--checkpoint", "run/best.ckpt", "--data", "other"], d);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("schema mismatch") && err.contains("shop.brand"), "{err}");
}

#[test]
fn data_root_comes_from_environment() {
    let dir = workdir();
    let d = dir.path();
    let cfg = fixture("tiny.toml");
    let o = Command::new(BIN)
        .args(["train", "--mode", "sup", "--config", cfg.to_str().unwrap(), "--out", "run", "--max-epochs", "1"])
        .current_dir(d)
        .env("LABES_DATA", d.join("data"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = labes(&["train", "--mode", "sup", "--out", "run2"], d);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(labes(&["train", "--mode", "sup", "--data", "missing", "--out", "o"], d).status.code(), Some(3));
    assert_eq!(labes(&["train", "--mode", "sup", "--data", "missing", "--out", "o", "--set", "train.lr=-1"], d).status.code(), Some(2));
    assert_eq!(labes(&["train", "--mode", "bogus", "--out", "o"], d).status.code(), Some(2));
    assert_eq!(labes(&["prepare", "camrest", "--dialogs", "a.json", "--db", "b.json", "--out", "o"], d).status.code(), Some(3));
    assert_eq!(labes(&["eval", "--checkpoint", "nothing.ckpt", "--data", "."], d).status.code(), Some(3));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(&["gradcheck", "--hidden", "3"], d);
    assert_eq!(out.matches("pass").count(), 2, "{out}");
    let o = labes(&["gradcheck", "--hidden", "3", "--corrupt", "1e-3"], d);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("worst"));
    let single = ok(&["gradcheck", "--hidden", "3", "--precision", "single"], d);
    assert!(single.contains("threshold 1e-2"), "{single}");
}

fn chat(d: &Path, script: &str) -> String {
    use std::io::Write;
    let mut child = Command::new(BIN)
        .args(["chat", "--checkpoint", "run/best.ckpt", "--data", "data", "--show-belief"])
        .current_dir(d)
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(script.as_bytes()).unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn chat_reproduces_golden_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = fixture("synth.toml");
    ok(&["synth", "--out", "data", "--spec", spec.to_str().unwrap(), "--dialogs", "200"], d);
    let cfg = fixture("golden.toml");
    ok(&["train", "--mode", "sup", "--config", cfg.to_str().unwrap(), "--data", "data", "--out", "run"], d);
    let script = "looking for k01\nq00 size please\nwhat is the price ?\n/reset\nlooking for k01\n";
    let got = chat(d, script);

    let blocks: Vec<&str> = got.split("[reset]\n").collect();
    let first_turn = |s: &str| s.lines().skip_while(|l| !l.starts_with("user: looking")).take(3).map(String::from).collect::<Vec<_>>();
    assert_eq!(first_turn(blocks[0]), first_turn(blocks[1]));

    let golden = fixture("../golden/chat.txt");
    if std::env::var_os("LABES_BLESS").is_some() {
        std::fs::write(&golden, &got).unwrap();
    }
    let want = std::fs::read_to_string(&golden).expect("golden transcript; run with LABES_BLESS=1 to record");
    assert_eq!(got, want);
}
