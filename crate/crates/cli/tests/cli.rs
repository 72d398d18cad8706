use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
backbone = "resnet"
n = 1
widths = [4, 8]
class_count = 5
input_size = 16

[wsms]
stages = 2
integration = "conv1x1"
integration_channels = 8

[train]
epochs = 2
batch_size = 16
lr_schedule = [[1, 0.05], [2, 0.01]]

[data]
kind = "synth"
train_per_class = 8
test_per_class = 4
seed = 3
"#;

fn wsms(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsms")).args(args).output().expect("spawn wsms")
}

fn preset(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../presets")
        .join(name)
        .display()
        .to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn count_prints_totals_for_presets() {
    let o = wsms(&["count", &preset("resnet110.cfg")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("params=1.73M mults=")), "{out}");
    assert!(out.contains("depth=110"));

    let o = wsms(&["count", &preset("wsms-densenet24-1x1.cfg")]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("params=28.0M"), "{}", stdout(&o));
}

#[test]
fn count_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("rows.csv");
    let o = wsms(&["count", &preset("wsms-resnet110-none.cfg"), "--input", "64x64", "--csv", path(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("layer_path,kind,params,mults,out_shape"));
    assert!(text.lines().count() > 100);
}

#[test]
fn config_errors_exit_two_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.cfg", "[model]\nbackbone = \"resnet\"\nn = = 3\n");
    let o = wsms(&["count", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let semantic = write(dir.path(), "semantic.cfg", "[model]\nbackbone = \"resnet\"\nn = 2\n\n[wsms]\nstages = 5\n");
    let o = wsms(&["count", &semantic]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 6"), "{}", stderr(&o));

    let o = wsms(&["count", path(&dir.path().join("missing.cfg"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = wsms(&["count", &preset("resnet110.cfg"), "--input", "32by32"]);
    assert_eq!(o.status.code(), Some(2));
}

fn dump(rows: &[(u64, usize, usize)]) -> String {
    let mut s = String::from("id,true,pred,correct\n");
    for &(id, t, p) in rows {
        s.push_str(&format!("{id},{t},{p},{}\n", u8::from(t == p)));
    }
    s
}

#[test]
fn compare_preds_emits_flipped_ids() {
    let dir = tempfile::tempdir().unwrap();
    let truth = [0usize, 1, 2, 3, 4, 0, 1, 2, 3];
    let make = |wrong: &[u64]| -> Vec<(u64, usize, usize)> {
        (0..9u64)
            .map(|i| {
                let t = truth[i as usize];
                (i, t, if wrong.contains(&i) { (t + 1) % 5 } else { t })
            })
            .collect()
    };
    let a = write(dir.path(), "a.csv", &dump(&make(&[1, 4, 7, 8])));
    let b = write(dir.path(), "b.csv", &dump(&make(&[2, 4, 7, 8])));
    let c = write(dir.path(), "c.csv", &dump(&make(&[8, 3])));
    let out = dir.path().join("ids.csv");
    let o = wsms(&["compare-preds", "--baselines", &a, &b, "--target", &c, "--csv", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "id\n4\n7\n");
    assert_eq!(fs::read_to_string(out).unwrap(), "id\n4\n7\n");

    let o = wsms(&["compare-preds", "--baselines", &a, "--target", path(&dir.path().join("nope.csv"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_names_a_faulty_primitive() {
    let o = wsms(&["gradcheck", "--seed", "4"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).lines().last().unwrap().starts_with("PASS max_rel_err="));

    let o = wsms(&["gradcheck", "--fault", "global_avg_pool"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAIL gradient mismatch in primitive global_avg_pool"), "{}", stdout(&o));
}

fn train(cfg: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", cfg, "--deterministic", "--seed", "1", "--out", path(out)];
    args.extend_from_slice(extra);
    wsms(&args)
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn training_is_reproducible_and_eval_matches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&a, &b] {
        let o = train(&cfg, run, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let metrics = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.jsonl")).unwrap());
    for f in ["final.ckpt", "best.ckpt", "predictions.csv", "config.toml", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(!a.join(".lock").exists());

    let manifest = json(a.join("manifest.json"));
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["deterministic"], true);
    assert_eq!(manifest["dataset"]["sha256"].as_str().unwrap().len(), 64);

    let summary = json(a.join("summary.json"));
    let csv = dir.path().join("eval.csv");
    let ckpt = a.join("final.ckpt");
    let o = wsms(&["eval", &cfg, "--checkpoint", path(&ckpt), "--csv", path(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let reported: f64 = stdout(&o)
        .split("test error ")
        .nth(1)
        .and_then(|s| s.split('%').next())
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(reported, summary["final_test_error"].as_f64().unwrap());
    assert_eq!(fs::read(csv).unwrap(), fs::read(a.join("predictions.csv")).unwrap());

    let o = wsms(&["eval", &cfg, "--checkpoint", path(&ckpt), "--split", "held_out", "--out", path(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("predictions-held_out.csv").is_file());
    let o = wsms(&["eval", &cfg, "--checkpoint", path(&ckpt), "--split", "validation"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn persisted_synthetic_data_trains_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let data = dir.path().join("synth");
    let o = wsms(&["synth-data", "--config", &cfg, "--out", path(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["train.bin", "test_seen.bin", "test_held_out.bin", "manifest.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&cfg, &a, &["--epochs", "1"]).status.success());
    assert!(train(&cfg, &b, &["--epochs", "1", "--data", path(&data)]).status.success());
    assert_eq!(
        json(a.join("manifest.json"))["dataset"]["sha256"],
        json(b.join("manifest.json"))["dataset"]["sha256"]
    );
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let run = dir.path().join("run");
    fs::create_dir(&run).unwrap();
    fs::write(run.join(".lock"), "1\n").unwrap();
    let o = train(&cfg, &run, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("in use"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "hot.cfg", &TINY.replace("[[1, 0.05], [2, 0.01]]", "[[1, 1e30]]"));
    let o = train(&cfg, &dir.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch 1, batch"), "{}", stderr(&o));
}

#[test]
fn cifar_config_without_data_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_wsms"))
        .args(["train", &preset("resnet110.cfg"), "--out", path(&dir.path().join("run"))])
        .env_remove("WSMS_DATA_ROOT")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("WSMS_DATA_ROOT"), "{}", stderr(&o));
}

#[test]
fn tiny_preset_trains_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = preset("synth-wsms-tiny.cfg");
    for run in [&a, &b] {
        let o = train(&cfg, run, &["--epochs", "1"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
}
