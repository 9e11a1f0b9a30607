use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
train_per_pattern = 1
val_per_pattern = 0
test_per_pattern = 1
point_budget = 600

[model.backbone]
k = 6
widths = [8, 12, 16]
up_widths = [12, 16]
out_channels = 10

[model.matcher]
input_dim = 30
descriptor_dim = 16
attention_hidden = 8
sinkhorn_iterations = 20

[train]
epochs = 1
batch_size = 2
lr = 0.001

[eval]
top_k = 16
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_combimatch"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.path("tiny.toml");
        let mut all = vec!["--config", s(&config)];
        all.extend_from_slice(args);
        run(&all)
    }

    fn gen(&self, name: &str) -> PathBuf {
        let out = self.path(name);
        let o = self.run(&["gen-toy", "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    }

    fn train(&self, data: &Path, name: &str) -> PathBuf {
        let out = self.path(name);
        let o = self.run(&["train", "--data", s(data), "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    }
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_train_eval_are_bitwise_reproducible() {
    let w = Workspace::new();
    let a = w.gen("a");
    let b = w.gen("b");
    assert_eq!(files(&a), files(&b));
    let ca = w.train(&a, "a.ckpt");
    let cb = w.train(&a, "b.ckpt");
    assert_eq!(std::fs::read(&ca).unwrap(), std::fs::read(&cb).unwrap());
    assert_eq!(std::fs::read(w.path("a.ckpt.log.jsonl")).unwrap(), std::fs::read(w.path("b.ckpt.log.jsonl")).unwrap());
    for (ck, out) in [(&ca, "ea.json"), (&cb, "eb.json")] {
        let o = w.run(&["eval", "--checkpoint", s(ck), "--data", s(&a), "--out", s(&w.path(out))]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(w.path("ea.json")).unwrap(), std::fs::read(w.path("eb.json")).unwrap());
}

#[test]
fn oracle_eval_scores_zero() {
    let w = Workspace::new();
    let data = w.gen("data");
    let out = w.path("oracle.json");
    let o = w.run(&["eval", "--oracle", "--data", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let m = &report["metrics"];
    for key in ["crd", "cd", "rmse_r", "rmse_t"] {
        assert!(m[key].as_f64().unwrap().abs() < 1e-9, "{key} = {}", m[key]);
    }
    assert_eq!(m["pa_crd"].as_f64(), Some(1.0));
}

#[test]
fn unwritable_output_fails_with_data_error() {
    let w = Workspace::new();
    let blocker = w.path("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = w.run(&["gen-toy", "--out", s(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn missing_split_fails() {
    let w = Workspace::new();
    let o = w.run(&["eval", "--oracle", "--data", s(&w.path("nowhere")), "--out", s(&w.path("m.json"))]);
    assert_eq!(o.status.code(), Some(2));
    let data = w.gen("data");
    let o = w.run(&["eval", "--oracle", "--data", s(&data), "--split", "holdout", "--out", s(&w.path("m.json"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_one() {
    let w = Workspace::new();
    assert_eq!(w.run(&["config", "show", "--loss.no_such_key", "1"]).status.code(), Some(1));
    assert_eq!(w.run(&["config", "show", "--loss.gamma", "-3"]).status.code(), Some(1));
    assert_eq!(w.run(&["eval", "--data", "x", "--out", "y"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_show_tags_provenance() {
    let o = run(&["config", "show", "--loss.gamma", "16", "--seed", "5"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("gamma = 16.0  # user-set"), "{text}");
    assert!(text.contains("delta_p = 0.1  # paper-default"));
    assert!(text.contains("batch_size = 8  # deviation-default"));
    assert!(text.contains("[train]\n"));
    assert_eq!(text.matches("[eval]").count(), 1);
    let train_seed = text.lines().skip_while(|l| *l != "[train]").find(|l| l.starts_with("seed")).unwrap();
    assert_eq!(train_seed, "seed = 5  # user-set");
}

#[test]
fn assemble_and_heatmap() {
    let w = Workspace::new();
    let data = w.gen("data");
    let ck = w.train(&data, "m.ckpt");
    let object = std::fs::read_dir(data.join("test"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "json"))
        .unwrap();
    let out = w.path("assembly.json");
    let o = w.run(&["assemble", "--checkpoint", s(&ck), "--object", s(&object), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["method"], "pairwise");
    assert_eq!(report["parts"].as_array().unwrap().len(), 2);

    let maps = w.path("maps");
    let o = w.run(&["export-heatmap", "--checkpoint", s(&ck), "--object", s(&object), "--source", "3", "--out-dir", s(&maps)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["shape.csv", "occupancy.csv", "combined.csv", "orientation.csv"] {
        let mut rows = csv::Reader::from_path(maps.join(name)).unwrap();
        assert!(rows.records().count() > 0, "{name} is empty");
    }
    let header = std::fs::read_to_string(maps.join("combined.csv")).unwrap();
    assert!(header.starts_with("target,x,y,z,score\n"));

    let o = w.run(&["export-heatmap", "--checkpoint", s(&ck), "--object", s(&object), "--source", "999999", "--out-dir", s(&maps)]);
    assert_eq!(o.status.code(), Some(1));
    let o = w.run(&["export-heatmap", "--checkpoint", s(&ck), "--object", s(&object), "--source", "0", "--target-part", "0", "--out-dir", s(&maps)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn single_part_assembly_is_rejected() {
    let w = Workspace::new();
    let data = w.gen("data");
    let ck = w.train(&data, "m.ckpt");
    let ply = w.path("part.ply");
    std::fs::write(&ply, "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n").unwrap();
    let o = w.run(&["assemble", "--checkpoint", s(&ck), "--parts", s(&ply), "--out", s(&w.path("a.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("two parts"));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let w = Workspace::new();
    let data = w.gen("data");
    let full = w.path("full.ckpt");
    let o = w.run(&["train", "--data", s(&data), "--out", s(&full), "--train.epochs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let half = w.train(&data, "half.ckpt");
    let resumed = w.path("resumed.ckpt");
    let log = w.path("half.ckpt.log.jsonl");
    let o = w.run(&["train", "--data", s(&data), "--out", s(&resumed), "--resume", s(&half), "--log", s(&log), "--train.epochs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&resumed).unwrap());
    assert_eq!(std::fs::read(w.path("full.ckpt.log.jsonl")).unwrap(), std::fs::read(&log).unwrap());
}
