use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use image::{Rgb, RgbImage};
use serde_json::Value;

fn barkid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_barkid"))
        .args(args)
        .args(["--log", "warn"])
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Flat-coloured classes with a little per-image variation.
fn write_corpus(root: &Path, counts: &[(&str, usize)]) {
    let colours = [[210, 50, 40], [30, 70, 210], [50, 190, 60]];
    for (c, &(name, n)) in counts.iter().enumerate() {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..n {
            let img = RgbImage::from_fn(40, 30, |x, y| {
                let jitter = ((x * 7 + y * 13 + i as u32 * 29) % 31) as u8;
                Rgb(colours[c].map(|v: u8| v.saturating_add(jitter)))
            });
            img.save(dir.join(format!("{i:02}.png"))).unwrap();
        }
    }
}

fn write_config(dir: &Path, root: &Path, out: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"seed = 4
dataset_root = "{}"
output_dir = "{}"

[resample]
target_per_class = 6

[preprocess]
height = 32
width = 32

[model]
backbone = "mobilenet"
pretrained = false
input_shape = [32, 32, 3]
num_classes = 2
head = [
    {{ type = "flatten" }},
    {{ type = "dense", units = 16, activation = "relu" }},
    {{ type = "dense", units = 2, activation = "softmax" }},
]

[training]
epochs = 1
batch_size = 4
record_wall_time = false
{extra}
"#,
        root.display(),
        out.display()
    );
    let path = dir.join("config.in.toml");
    std::fs::write(&path, text).unwrap();
    path
}

struct Toy {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    dir: PathBuf,
}

fn toy(counts: &[(&str, usize)]) -> Toy {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    write_corpus(&root, counts);
    Toy {
        dir: tmp.path().to_path_buf(),
        root,
        _tmp: tmp,
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn ingest_writes_a_stable_manifest() {
    let t = toy(&[("Alnus", 3), ("Betula", 4)]);
    let out = t.dir.join("manifest.json");
    let run = barkid(&["ingest", "--root", t.root.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let first = std::fs::read(&out).unwrap();
    let m = read_json(&out);
    assert_eq!(m["classes"], serde_json::json!(["Alnus", "Betula"]));
    assert_eq!(m["counts"]["Betula"], 4);
    assert_eq!(m["records"].as_array().unwrap().len(), 7);
    barkid(&["ingest", "--root", t.root.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(std::fs::read(&out).unwrap(), first);
}

#[test]
fn missing_root_is_a_usage_error() {
    let run = barkid(&["ingest", "--root", "/definitely/not/here", "--out", "/tmp/unused.json"]);
    assert_eq!(code(&run), 2);
    assert!(String::from_utf8_lossy(&run.stderr).contains("root not found"));
}

#[test]
fn rebalance_is_reproducible_and_a_no_op_when_balanced() {
    let t = toy(&[("Alnus", 3), ("Betula", 8)]);
    let manifest = t.dir.join("manifest.json");
    barkid(&["ingest", "--root", t.root.to_str().unwrap(), "--out", manifest.to_str().unwrap()]);
    let mut provenances = Vec::new();
    for name in ["a", "b"] {
        let out = t.dir.join(name);
        let run = barkid(&[
            "rebalance",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--target",
            "5",
            "--seed",
            "1",
        ]);
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
        let m = read_json(&out.join("manifest.json"));
        assert_eq!(m["counts"], serde_json::json!({"Alnus": 5, "Betula": 5}));
        let p = read_json(&out.join("provenance.json"));
        provenances.push(p["entries"].as_array().unwrap().iter().map(|e| e["ops"].clone()).collect::<Vec<_>>());
        assert_eq!(std::fs::read_dir(out.join("Alnus")).unwrap().count(), 2);
    }
    assert_eq!(provenances[0], provenances[1]);

    let balanced = toy(&[("Alnus", 4), ("Betula", 4)]);
    let manifest = balanced.dir.join("manifest.json");
    barkid(&["ingest", "--root", balanced.root.to_str().unwrap(), "--out", manifest.to_str().unwrap()]);
    let out = balanced.dir.join("out");
    let run = barkid(&["rebalance", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap(), "--target", "4"]);
    assert_eq!(code(&run), 0);
    assert!(read_json(&out.join("provenance.json"))["entries"].as_array().unwrap().is_empty());
    assert!(!out.join("Alnus").exists());
}

const DETERMINISTIC: [&str; 9] = [
    "config",
    "manifest",
    "provenance",
    "split",
    "checkpoint",
    "history",
    "report_json",
    "report_txt",
    "plot_loss",
];

#[test]
fn train_smoke_run_writes_a_complete_reproducible_run() {
    let t = toy(&[("Alnus", 5), ("Betula", 7)]);
    let out = t.dir.join("run");
    let config = write_config(&t.dir, &t.root, &out, "");
    let started = Instant::now();
    let run = barkid(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert!(started.elapsed() < Duration::from_secs(300));
    assert!(stdout(&run).contains("weighted avg"));

    let record = read_json(&out.join("run_record.json"));
    assert_eq!(record["config_snapshot"].as_str().unwrap(), std::fs::read_to_string(&config).unwrap());
    let artifacts = record["artifacts"].as_object().unwrap();
    for (key, a) in artifacts {
        let path = out.join(a["path"].as_str().unwrap());
        assert!(path.is_file(), "{key} missing");
        let digest = {
            use sha2::Digest;
            hex::encode(sha2::Sha256::digest(std::fs::read(&path).unwrap()))
        };
        assert_eq!(a["sha256"], digest.as_str(), "{key}");
    }
    for f in ["history.csv", "plots/accuracy.png", "plots/loss.png", "report.txt", "checkpoint.safetensors"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);

    // The effective config alone reproduces the run.
    let hashes = |r: &Value| DETERMINISTIC.map(|k| r["artifacts"][k]["sha256"].as_str().expect(k).to_string());
    let first = hashes(&record);
    let rerun = barkid(&["train", "--config", out.join("config.toml").to_str().unwrap()]);
    assert_eq!(code(&rerun), 0);
    assert_eq!(hashes(&read_json(&out.join("run_record.json"))), first);
}

#[test]
fn strict_zero_learning_rate_is_rejected() {
    let t = toy(&[("Alnus", 2), ("Betula", 2)]);
    let config = write_config(&t.dir, &t.root, &t.dir.join("run"), "learning_rate = 0.0");
    let run = barkid(&["train", "--config", config.to_str().unwrap(), "--strict"]);
    assert_eq!(code(&run), 2);
    assert!(!t.dir.join("run").exists());
}

#[test]
fn missing_pretrained_weights_are_a_usage_error_with_a_hint() {
    let t = toy(&[("Alnus", 2), ("Betula", 2)]);
    let config = write_config(&t.dir, &t.root, &t.dir.join("run"), "");
    let run = Command::new(env!("CARGO_BIN_EXE_barkid"))
        .args(["train", "--config", config.to_str().unwrap(), "--log", "error"])
        .env("BARKID_WEIGHTS_DIR", t.dir.join("no-weights"))
        .output()
        .unwrap();
    // `--no-pretrained` is not given, but the config already disables it.
    assert_eq!(code(&run), 0);
    let text = std::fs::read_to_string(&config).unwrap().replace("pretrained = false", "pretrained = true");
    std::fs::write(&config, text).unwrap();
    let run = Command::new(env!("CARGO_BIN_EXE_barkid"))
        .args(["train", "--config", config.to_str().unwrap(), "--log", "error"])
        .env("BARKID_WEIGHTS_DIR", t.dir.join("no-weights"))
        .output()
        .unwrap();
    assert_eq!(code(&run), 2);
    let err = String::from_utf8_lossy(&run.stderr);
    assert!(err.contains("BARKID_WEIGHTS_DIR") && err.contains("mobilenet_notop.safetensors"), "{err}");
}

/// A model trained until it separates two flat colours perfectly. Randomly
/// initialised MobileNet features underflow, so this uses a frozen ResNet50.
fn memorised(t: &Toy) -> PathBuf {
    let out = t.dir.join("run");
    let extra = "learning_rate = 0.001\n\n[resample]\nenabled = false\n\n[split]\nratio = 1.0";
    let text = std::fs::read_to_string(write_config(&t.dir, &t.root, &out, extra))
        .unwrap()
        .replace("[resample]\ntarget_per_class = 6\n", "")
        .replace("backbone = \"mobilenet\"", "backbone = \"resnet50\"\nbackbone_trainable = false")
        .replace("epochs = 1", "epochs = 30");
    let config = t.dir.join("memorise.toml");
    std::fs::write(&config, text).unwrap();
    let run = barkid(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    out
}

#[test]
fn evaluate_and_predict_with_a_memorised_checkpoint() {
    let t = toy(&[("Alnus", 4), ("Betula", 4)]);
    let run_dir = memorised(&t);
    let ckpt = run_dir.join("checkpoint.safetensors");
    let manifest = run_dir.join("manifest.json");
    let out = t.dir.join("eval");
    let run = barkid(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["accuracy"], 1.0);
    // Every number in the text table agrees with the JSON at two decimals.
    let text = std::fs::read_to_string(out.join("report.txt")).unwrap();
    for (i, class) in ["Alnus", "Betula"].iter().enumerate() {
        let row: Vec<&str> = text.lines().find(|l| l.trim_start().starts_with(class)).unwrap().split_whitespace().collect();
        let m = &report["per_class"][i];
        let fmt = |k: &str| format!("{:.2}", m[k].as_f64().unwrap());
        assert_eq!(row[1..], [fmt("precision"), fmt("recall"), fmt("f1"), m["support"].to_string()]);
    }

    let image = t.root.join("Betula/00.png");
    let predict = |top: &str| {
        let run = barkid(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(), "--top", top]);
        assert_eq!(code(&run), 0);
        stdout(&run)
    };
    let all = predict("2");
    let rows: Vec<(f64, &str)> = all
        .lines()
        .map(|l| {
            let (p, c) = l.split_once('\t').unwrap();
            (p.parse().unwrap(), c)
        })
        .collect();
    assert_eq!(rows[0].1, "Betula");
    assert!(rows[0].0 >= rows[1].0);
    assert!((rows.iter().map(|r| r.0).sum::<f64>() - 1.0).abs() < 1e-5);
    assert_eq!(predict("1").lines().count(), 1);
    assert_eq!(predict("2"), all);
}

#[test]
fn evaluate_rejects_a_manifest_with_other_classes() {
    let t = toy(&[("Alnus", 2), ("Betula", 3)]);
    let out = t.dir.join("run");
    let config = write_config(&t.dir, &t.root, &out, "");
    assert_eq!(code(&barkid(&["train", "--config", config.to_str().unwrap()])), 0);
    let other = toy(&[("Alnus", 2), ("Betula", 2), ("Carpinus", 2)]);
    let manifest = other.dir.join("m.json");
    barkid(&["ingest", "--root", other.root.to_str().unwrap(), "--out", manifest.to_str().unwrap()]);
    let ckpt = out.join("checkpoint.safetensors");
    let run = barkid(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(code(&run), 2);

    let bytes = std::fs::read(&ckpt).unwrap();
    let truncated = t.dir.join("truncated.safetensors");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let run = barkid(&[
        "evaluate",
        "--checkpoint",
        truncated.to_str().unwrap(),
        "--manifest",
        out.join("manifest.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 3);
}

#[test]
fn crossval_reports_folds_and_their_means() {
    let t = toy(&[("Alnus", 3), ("Betula", 5)]);
    let out = t.dir.join("cv");
    let config = write_config(&t.dir, &t.root, &out, "");
    let bad = barkid(&["crossval", "--config", config.to_str().unwrap(), "--k", "1"]);
    assert_eq!(code(&bad), 2);
    let run = barkid(&["crossval", "--config", config.to_str().unwrap(), "--k", "2"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let cv = read_json(&out.join("cv.json"));
    let folds = cv["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 2);
    for key in ["accuracy", "precision", "recall", "f1"] {
        let mean = folds.iter().map(|f| f[key].as_f64().unwrap()).sum::<f64>() / 2.0;
        assert_eq!(cv["average"][key].as_f64().unwrap(), mean, "{key}");
    }
    let csv = std::fs::read_to_string(out.join("cv.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().last().unwrap().starts_with("average"));
}

#[test]
fn sweep_records_each_checkpoint_epoch() {
    let t = toy(&[("Alnus", 3), ("Betula", 4)]);
    let out = t.dir.join("sweep");
    let config = write_config(&t.dir, &t.root, &out, "");
    let run = barkid(&["sweep-epochs", "--config", config.to_str().unwrap(), "--checkpoints", "1,3"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let points = read_json(&out.join("sweep.json"));
    let epochs: Vec<u64> = points.as_array().unwrap().iter().map(|p| p["epoch"].as_u64().unwrap()).collect();
    assert_eq!(epochs, [1, 3]);
    assert_eq!(std::fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 4);
}

#[test]
fn split_first_keeps_augmented_images_out_of_the_test_side() {
    let t = toy(&[("Alnus", 5), ("Betula", 10)]);
    let out = t.dir.join("run");
    let config = write_config(&t.dir, &t.root, &out, "");
    let run = barkid(&["train", "--config", config.to_str().unwrap(), "--split-first"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let manifest = read_json(&out.join("manifest.json"));
    let split = read_json(&out.join("split.json"));
    let records = manifest["records"].as_array().unwrap();
    for i in split["test_indices"].as_array().unwrap() {
        assert_eq!(records[i.as_u64().unwrap() as usize]["origin"], "original");
    }
}
