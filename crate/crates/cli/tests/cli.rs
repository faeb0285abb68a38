use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prodcat::corpus::{write_raw_csv, ColumnMap};
use prodcat::synthetic;

const CONFIG: &str = r#"
seed = 7

[vocab]
max_len = 12

[model]
embed_dim = 16
lstm_units = [16]
lstm_dropout = [0.0]
spatial_dropout = 0.0

[train]
lr = 0.01
batch_size = 32
max_epochs = 4
patience = 2
"#;

fn prodcat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prodcat")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("config.toml");
        std::fs::write(&config, CONFIG).unwrap();
        write_raw_csv(&synthetic::records(600, 3), &root.join("raw.csv"), &ColumnMap::default(), b';').unwrap();
        Workspace { _dir: dir, root, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all = vec!["--config", s(&self.config)];
        all.extend_from_slice(args);
        prodcat(&all)
    }

    fn split(&self) {
        let raw = self.path("raw.csv");
        let clean = self.path("clean.csv");
        let o = self.run(&["preprocess", "--input", s(&raw), "--output", s(&clean)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let splits = self.path("splits");
        let o = self.run(&["split", "--input", s(&clean), "--out-dir", s(&splits), "--ratios", "0.7,0.15,0.15"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }

    fn train(&self, out: &str) -> Output {
        let t = self.path("splits/train.csv");
        let v = self.path("splits/val.csv");
        let out = self.path(out);
        self.run(&["train", "--model", "bilstm", "--loss", "focal", "--train", s(&t), "--val", s(&v), "--out", s(&out)])
    }
}

#[test]
fn full_pipeline() {
    let w = Workspace::new();
    w.split();
    for f in ["train.csv", "val.csv", "test.csv"] {
        assert!(w.path("splits").join(f).exists());
    }

    let vocab = w.path("vocab.txt");
    let o = w.run(&["build-vocab", "--input", s(&w.path("splits/train.csv")), "--output", s(&vocab)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("OK build-vocab"));

    let o = w.train("model.ckpt");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("OK train"), "{}", stdout(&o));
    assert!(w.path("model.ckpt").exists());
    assert!(w.path("model.ckpt.vocab").exists());
    let history = std::fs::read_to_string(w.path("model.ckpt.history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss"));

    // The vocabulary built by `train` matches the standalone one.
    assert_eq!(
        std::fs::read_to_string(&vocab).unwrap(),
        std::fs::read_to_string(w.path("model.ckpt.vocab")).unwrap()
    );

    let report = w.path("report.json");
    let o = w.run(&[
        "evaluate",
        "--model",
        s(&w.path("model.ckpt")),
        "--data",
        s(&w.path("splits/test.csv")),
        "--report",
        s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    for key in ["segment=", "category=", "subcategory=", "product=", "mean="] {
        assert!(line.contains(key), "{line}");
    }
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["heads"].as_array().unwrap().len(), 4);

    let o = w.run(&["predict", "--model", s(&w.path("model.ckpt")), "--text", "Sabao Omo 1kg."]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("status=classified"), "{}", stdout(&o));

    let o = w.run(&["predict", "--model", s(&w.path("model.ckpt")), "--text", "  ...  "]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("status=unclassifiable"), "{}", stdout(&o));
}

#[test]
fn training_is_reproducible() {
    let w = Workspace::new();
    w.split();
    assert!(w.train("a.ckpt").status.success());
    let o = w.train("b.ckpt");
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(w.path("a.ckpt")).unwrap(), std::fs::read(w.path("b.ckpt")).unwrap());
    assert_eq!(
        std::fs::read(w.path("a.ckpt.history.csv")).unwrap(),
        std::fs::read(w.path("b.ckpt.history.csv")).unwrap()
    );
}

#[test]
fn thread_count_does_not_change_the_checkpoint() {
    let w = Workspace::new();
    w.split();
    let t = w.path("splits/train.csv");
    let v = w.path("splits/val.csv");
    let mut outs = Vec::new();
    for threads in ["1", "3"] {
        let out = w.path(&format!("t{threads}.ckpt"));
        let o = w.run(&["--threads", threads, "train", "--train", s(&t), "--val", s(&v), "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        outs.push(std::fs::read(out).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn missing_input_is_an_io_error_naming_the_path() {
    let w = Workspace::new();
    let missing = w.path("nope.csv");
    let o = w.run(&["preprocess", "--input", s(&missing), "--output", s(&w.path("x.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.csv"), "{}", stderr(&o));
}

#[test]
fn bad_ratios_are_a_data_error_naming_the_key() {
    let w = Workspace::new();
    let o = w.run(&[
        "split",
        "--input",
        s(&w.path("raw.csv")),
        "--out-dir",
        s(&w.path("out")),
        "--ratios",
        "0.7,0.2,0.2",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("split.ratios"), "{}", stderr(&o));
    assert!(!w.path("out").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let w = Workspace::new();
    std::fs::write(&w.config, "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = w.run(&["preprocess", "--input", s(&w.path("raw.csv")), "--output", s(&w.path("x.csv"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(prodcat(&["preprocess", "--bogus"]).status.code(), Some(1));
    assert_eq!(prodcat(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(prodcat(&["train", "--model", "cnn"]).status.code(), Some(1));
    assert_eq!(prodcat(&["--help"]).status.code(), Some(0));
}
