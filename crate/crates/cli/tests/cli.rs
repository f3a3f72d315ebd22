use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_devfuse");

fn tiny_config(dir: &Path) -> PathBuf {
    let text = format!(
        r#"
[model]
d_node = 8
d_text = 8
d_model = 8
heads = 2
fusion_layers = 1
conv_layers = 1
mlp_dims = [16, 2]
max_tokens = 12
graph.num_centers = 10

[train]
lr_main = 3e-3
lr_text_multiplier = 1.0
warmup_epochs = 1
total_epochs = 4
early_stopping_patience = 2

[data]
devices = "{d}/data/devices.jsonl"
structures = "{d}/data/structures.jsonl"

[output]
dir = "{d}/run"

[synthetic]
num_devices = 80
num_configs = 30
"#,
        d = dir.display()
    );
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    ok(&["generate", "--config", s(&cfg)]);
    let data = dir.path().join("data");
    let first: Vec<Vec<u8>> = ["devices.jsonl", "structures.jsonl", "ground_truth.csv"]
        .iter()
        .map(|f| fs::read(data.join(f)).unwrap())
        .collect();
    assert_eq!(String::from_utf8_lossy(&first[0]).lines().count(), 80);
    ok(&["generate", "--config", s(&cfg)]);
    for (f, bytes) in ["devices.jsonl", "structures.jsonl", "ground_truth.csv"].iter().zip(&first) {
        assert_eq!(&fs::read(data.join(f)).unwrap(), bytes, "{f}");
    }
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "train.lr_mian = 0.1\n").unwrap();
    let out = run(&["train", "--config", s(&p)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lr_mian"));

    fs::write(&p, "train.lr_main = 0.1\n").unwrap();
    let out = run(&["generate", "--config", s(&p)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synthetic"));

    let out = run(&["eval", "--split", "holdout"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = run(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
}

fn read_csv(p: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(p).unwrap();
    r.records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn train_eval_predict_calibrate_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = s(&cfg);
    ok(&["generate", "--config", c]);
    ok(&["train", "--config", c, "--seed", "5"]);
    let run_dir = dir.path().join("run");
    let log1 = fs::read(run_dir.join("training_log.json")).unwrap();
    for f in ["model.ckpt", "split.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    ok(&["train", "--config", c, "--seed", "5"]);
    assert_eq!(fs::read(run_dir.join("training_log.json")).unwrap(), log1);

    let preds = dir.path().join("val.csv");
    let e1 = ok(&["eval", "--config", c, "--split", "val", "--out", s(&preds)]);
    let e2 = ok(&["eval", "--config", c, "--split", "val", "--out", s(&preds)]);
    assert_eq!(e1.stdout, e2.stdout);
    let metrics: serde_json::Value = serde_json::from_slice(&e1.stdout).unwrap();
    assert_eq!(metrics["n"], 8);
    let rows = read_csv(&preds);
    assert_eq!(rows.len(), 8);
    assert!(dir.path().join("val.json").exists());

    // predict on the val devices only, with one unresolved record added
    let all = fs::read_to_string(dir.path().join("data/devices.jsonl")).unwrap();
    let ids: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    let mut lines: Vec<String> = all
        .lines()
        .filter(|l| ids.iter().any(|id| l.contains(&format!("\"{id}\""))))
        .map(String::from)
        .collect();
    let mut ghost: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    ghost["device_id"] = "ghost".into();
    ghost["structure_ref"] = "nowhere".into();
    ghost.as_object_mut().unwrap().remove("pce");
    lines.push(ghost.to_string());
    let query = dir.path().join("query.jsonl");
    fs::write(&query, lines.join("\n")).unwrap();
    let out = dir.path().join("pred.csv");
    let p = ok(&["predict", "--config", c, "--devices", s(&query), "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&p.stderr).contains("ghost"));
    let mut got = read_csv(&out);
    let mut want: Vec<Vec<String>> = rows.iter().map(|r| vec![r[0].clone(), r[2].clone(), r[3].clone()]).collect();
    got.sort();
    want.sort();
    assert_eq!(got, want);
    for r in &got {
        assert!(r[2].parse::<f64>().unwrap() >= 1e-3);
    }

    fs::write(&query, ghost.to_string()).unwrap();
    let failed = run(&["predict", "--config", c, "--devices", s(&query), "--out", s(&out)]);
    assert_eq!(failed.status.code(), Some(3));

    let table = dir.path().join("calib.csv");
    ok(&["calibrate", s(&preds), "--bins", "4", "--out", s(&table)]);
    let text = fs::read_to_string(&table).unwrap();
    assert!(text.starts_with("bin,n,mean_sigma,mean_abs_err,se,ci_low,ci_high,theory"));
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().last().unwrap().starts_with("picp_95,"));
    let too_many = run(&["calibrate", s(&preds), "--bins", "9", "--out", s(&table)]);
    assert_eq!(too_many.status.code(), Some(3));

    // a config that disagrees with the checkpoint names the key
    let changed = fs::read_to_string(&cfg).unwrap().replace("d_model = 8", "d_model = 16");
    let cfg2 = dir.path().join("changed.toml");
    fs::write(&cfg2, changed).unwrap();
    let out = run(&["eval", "--config", s(&cfg2), "--checkpoint", s(&run_dir.join("model.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.d_model"));
}

#[test]
fn calibrate_names_a_missing_column() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.csv");
    fs::write(&p, "device_id,y_true,mu\na,1,1\nb,2,2\n").unwrap();
    let out = run(&["calibrate", s(&p), "--bins", "2", "--out", s(&dir.path().join("c.csv"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`sigma`"));
}
