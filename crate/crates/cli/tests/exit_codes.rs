use std::path::Path;
use std::process::{Command, Output};

fn panolayout(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panolayout"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path, data: &Path) -> String {
    let path = dir.join("tiny.cfg");
    let text = format!(
        "# small enough to train in seconds\n\
         data.dir = {}\n\
         data.samples = 24\n\
         split.val = 4\n\
         split.test = 4\n\
         split.labeled = 4\n\
         train.total_iters = 6\n\
         train.eval_interval = 3\n",
        data.display()
    );
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn generate_train_evaluate_succeed() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    let cfg = write_config(root.path(), &data);
    let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());

    let gen = panolayout(&["generate-data", "--config", &cfg, "--seed", "3", "--out", d]);
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(String::from_utf8_lossy(&gen.stdout).contains("samples=24"));
    // refuses to overwrite without --force
    assert_eq!(code(&panolayout(&["generate-data", "--config", &cfg, "--out", d])), 1);
    assert_eq!(code(&panolayout(&["generate-data", "--config", &cfg, "--seed", "3", "--out", d, "--force"])), 0);

    let train = panolayout(&["train", "--config", &cfg, "--seed", "1", "--out", r]);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    assert!(run.join("history.jsonl").exists());
    assert_eq!(code(&panolayout(&["train", "--config", &cfg, "--seed", "1", "--out", r, "--resume"])), 0);

    let eval = panolayout(&["evaluate", "--config", &cfg, "--seed", "1", "--out", r]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let text = String::from_utf8_lossy(&eval.stdout);
    assert!(text.contains("student iou3d=") && text.contains("teacher iou3d="));
}

#[test]
fn validation_failures_exit_with_one() {
    let root = tempfile::tempdir().unwrap();
    let bad = root.path().join("bad.cfg");
    std::fs::write(&bad, "train.lr = -1\n").unwrap();
    let out = root.path().join("out");
    let o = out.to_str().unwrap();
    assert_eq!(code(&panolayout(&["train", "--config", bad.to_str().unwrap(), "--out", o])), 1);
    std::fs::write(&bad, "no.such.key = 1\n").unwrap();
    assert_eq!(code(&panolayout(&["generate-data", "--config", bad.to_str().unwrap(), "--out", o])), 1);
    // --out is required
    assert_eq!(code(&panolayout(&["generate-data"])), 1);
}

#[test]
fn runtime_failures_exit_with_two() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("missing");
    let cfg = write_config(root.path(), &missing);
    let out = root.path().join("out");
    // the config is valid; the dataset it names does not exist
    assert_eq!(code(&panolayout(&["train", "--config", &cfg, "--out", out.to_str().unwrap()])), 2);
    let absent = root.path().join("absent.cfg");
    assert_eq!(code(&panolayout(&["train", "--config", absent.to_str().unwrap(), "--out", out.to_str().unwrap()])), 2);
}
