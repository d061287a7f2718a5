use std::path::{Path, PathBuf};

use barkid::dataset::{kfold_partition, load_rgb, scan_dataset, split_dataset, DatasetManifest, SplitAssignment};
use barkid::evaluator::{self, cross_validate, EvaluationReport};
use barkid::model::{build_model, load_checkpoint, save_weights, Classifier};
use barkid::preprocess::{encode_indices, normalize, resize_image, Batch, Interpolation, PreprocessConfig};
use barkid::resampler::{execute_plan, plan_rebalance, Provenance};
use barkid::trainer::{history_to_csv, plot_history, sweep_epochs, train, TrainingConfig, TrainingHistory};
use barkid::{Error, Result};
use barkid_nn::Tensor;
use serde::Serialize;

use crate::config::{RunConfig, Stage};
use crate::record::RunRecord;
use crate::{RunArgs, Subset};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::io(path, source)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serialises");
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

pub fn ingest(root: &Path, out: &Path, strict: bool) -> Result<()> {
    let manifest = scan_dataset(root, strict)?;
    manifest.save(out)?;
    log::info!(
        "{} classes, {} images -> {}",
        manifest.num_classes(),
        manifest.len(),
        out.display()
    );
    Ok(())
}

pub fn rebalance(manifest_path: &Path, out: &Path, config: Option<&Path>, target: Option<usize>, seed: Option<u64>) -> Result<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let mut config = match config {
        Some(p) => RunConfig::load(p)?.0,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(t) = target {
        config.resample.target_per_class = t;
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let (resampled, provenance) = resample(&manifest, &config, config.resample.target_per_class, out)?;
    resampled.save(&out.join("manifest.json"))?;
    write_text(&out.join("provenance.json"), &provenance.to_json())?;
    log::info!(
        "{} images ({} generated) -> {}",
        resampled.len(),
        provenance.entries.len(),
        out.display()
    );
    Ok(())
}

fn resample(manifest: &DatasetManifest, config: &RunConfig, target: usize, out: &Path) -> Result<(DatasetManifest, Provenance)> {
    let plan = plan_rebalance(manifest, target, config.stage_seed(Stage::Rebalance))?;
    let done = execute_plan(&plan, manifest, &config.resample.augmentations, out)?;
    Ok((done.manifest, done.provenance))
}

/// A config with flag overrides applied, plus what the record needs to replay it.
struct Resolved {
    config: RunConfig,
    snapshot: String,
    overrides: Vec<String>,
    run_dir: PathBuf,
}

fn resolve(args: &RunArgs) -> Result<Resolved> {
    let (mut config, snapshot) = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => (RunConfig::default(), String::new()),
    };
    let mut overrides = Vec::new();
    let mut note = |s: String| overrides.push(s);
    if let Some(v) = &args.root {
        config.dataset_root = v.clone();
        note(format!("dataset_root={}", v.display()));
    }
    if let Some(v) = &args.out {
        config.output_dir = v.clone();
        note(format!("output_dir={}", v.display()));
    }
    if let Some(v) = args.seed {
        config.seed = v;
        note(format!("seed={v}"));
    }
    if let Some(v) = args.epochs {
        config.training.epochs = v;
        note(format!("training.epochs={v}"));
    }
    if let Some(v) = args.learning_rate {
        config.training.learning_rate = v;
        note(format!("training.learning_rate={v}"));
    }
    if let Some(v) = args.batch_size {
        config.training.batch_size = v;
        note(format!("training.batch_size={v}"));
    }
    if let Some(v) = args.target {
        config.resample.target_per_class = v;
        note(format!("resample.target_per_class={v}"));
    }
    if let Some(v) = args.backbone {
        config.model.backbone = v;
        note(format!("model.backbone={v}"));
    }
    if let Some(v) = args.num_classes {
        config.model.num_classes = v;
        note(format!("model.num_classes={v}"));
    }
    if args.split_first {
        config.split_first = true;
        note("split_first=true".into());
    }
    if args.strict {
        config.strict = true;
        note("strict=true".into());
    }
    if args.no_pretrained {
        config.model.pretrained = false;
        note("model.pretrained=false".into());
    }
    if args.freeze_backbone {
        config.model.backbone_trainable = false;
        note("model.backbone_trainable=false".into());
    }
    if args.no_wall_time {
        config.training.record_wall_time = false;
        note("training.record_wall_time=false".into());
    }
    config.validate()?;
    let run_dir = config.output_dir.clone();
    Ok(Resolved {
        config,
        snapshot,
        overrides,
        run_dir,
    })
}

fn start_record(command: &str, r: &Resolved) -> Result<RunRecord> {
    std::fs::create_dir_all(&r.run_dir).map_err(io_err(&r.run_dir))?;
    let effective = r.config.to_toml();
    write_text(&r.run_dir.join("config.toml"), &effective)?;
    let mut record = RunRecord::new(command, r.snapshot.clone(), r.overrides.clone(), effective);
    record.seeds.insert("global".into(), r.config.seed);
    for stage in [Stage::Rebalance, Stage::Split, Stage::Model, Stage::Train, Stage::CrossVal] {
        record.seeds.insert(stage.label().into(), r.config.stage_seed(stage));
    }
    record.add_artifact("config", &r.run_dir, "config.toml")?;
    Ok(record)
}

/// Scan, rebalance and split as configured, writing manifest, provenance and
/// split into the run directory.
fn prepare_data(r: &Resolved, record: &mut RunRecord) -> Result<(DatasetManifest, SplitAssignment)> {
    let c = &r.config;
    let scanned = scan_dataset(&c.dataset_root, c.strict)?;
    if scanned.num_classes() != c.model.num_classes {
        return Err(Error::invalid(format!(
            "the corpus has {} classes but model.num_classes is {}",
            scanned.num_classes(),
            c.model.num_classes
        )));
    }
    let split_seed = c.stage_seed(Stage::Split);
    let augmented_dir = r.run_dir.join("augmented");
    if augmented_dir.exists() {
        std::fs::remove_dir_all(&augmented_dir).map_err(io_err(&augmented_dir))?;
    }
    let (manifest, split, provenance) = if !c.resample.enabled {
        let split = split_dataset(&scanned, c.split.ratio, split_seed, c.split.stratified)?;
        (scanned, split, None)
    } else if c.split_first {
        let first = split_dataset(&scanned, c.split.ratio, split_seed, c.split.stratified)?;
        let train_side = scanned.subset(&first.train_indices)?;
        let target = ((c.resample.target_per_class as f64 * c.split.ratio).round() as usize).max(1);
        let (train_m, prov) = resample(&train_side, c, target, &augmented_dir)?;
        let n_train = train_m.len();
        let mut records = train_m.records;
        records.extend(scanned.subset(&first.test_indices)?.records);
        let combined = DatasetManifest::new(scanned.root.clone(), scanned.classes.clone(), records)?;
        let split = SplitAssignment {
            train_indices: (0..n_train).collect(),
            test_indices: (n_train..combined.len()).collect(),
            ..first
        };
        (combined, split, Some(prov))
    } else {
        let (m, prov) = resample(&scanned, c, c.resample.target_per_class, &augmented_dir)?;
        let split = split_dataset(&m, c.split.ratio, split_seed, c.split.stratified)?;
        (m, split, Some(prov))
    };
    manifest.save(&r.run_dir.join("manifest.json"))?;
    record.add_artifact("manifest", &r.run_dir, "manifest.json")?;
    if let Some(p) = provenance {
        write_text(&r.run_dir.join("provenance.json"), &p.to_json())?;
        record.add_artifact("provenance", &r.run_dir, "provenance.json")?;
    }
    write_json(&r.run_dir.join("split.json"), &split)?;
    record.add_artifact("split", &r.run_dir, "split.json")?;
    log::info!(
        "{} images in {} classes; {} train, {} test",
        manifest.len(),
        manifest.num_classes(),
        split.train_indices.len(),
        split.test_indices.len()
    );
    Ok((manifest, split))
}

fn new_model(c: &RunConfig, manifest: &DatasetManifest) -> Result<Classifier> {
    let mut model = build_model(&c.model, c.stage_seed(Stage::Model))?;
    model.set_classes(manifest.classes.clone())?;
    Ok(model)
}

fn training_config(c: &RunConfig) -> TrainingConfig {
    TrainingConfig {
        seed: c.stage_seed(Stage::Train),
        ..c.training.clone()
    }
}

fn write_history(history: &TrainingHistory, run_dir: &Path, record: &mut RunRecord) -> Result<()> {
    write_text(&run_dir.join("history.csv"), &history_to_csv(history))?;
    record.add_artifact("history", run_dir, "history.csv")?;
    let plots = plot_history(history, &run_dir.join("plots"))?;
    for (key, path) in [("plot_accuracy", plots.accuracy_png), ("plot_loss", plots.loss_png)] {
        let rel = path.strip_prefix(run_dir).unwrap_or(&path).to_path_buf();
        record.add_artifact(key, run_dir, rel)?;
    }
    Ok(())
}

fn write_report(report: &EvaluationReport, dir: &Path) -> Result<()> {
    write_text(&dir.join("report.json"), &report.to_json())?;
    write_text(&dir.join("report.txt"), &report.to_text())
}

pub fn run_training(args: &RunArgs) -> Result<()> {
    let r = resolve(args)?;
    let mut record = start_record("train", &r)?;
    let (manifest, split) = prepare_data(&r, &mut record)?;
    let c = &r.config;
    let train_batch = encode_indices(&manifest, &split.train_indices, &c.preprocess)?;
    let test_batch = encode_indices(&manifest, &split.test_indices, &c.preprocess)?;
    let mut model = new_model(c, &manifest)?;
    let tconfig = training_config(c);
    let val = (!test_batch.is_empty()).then_some(&test_batch);
    let mut history = train(&mut model, &train_batch, &tconfig, val)?;
    let checkpoint = r.run_dir.join("checkpoint.safetensors");
    save_weights(&model, &checkpoint)?;
    history.weights = Some(PathBuf::from("checkpoint.safetensors"));
    record.add_artifact("checkpoint", &r.run_dir, "checkpoint.safetensors")?;
    write_history(&history, &r.run_dir, &mut record)?;
    if val.is_some() {
        let report = evaluator::evaluate(&model, &test_batch)?;
        write_report(&report, &r.run_dir)?;
        record.add_artifact("report_json", &r.run_dir, "report.json")?;
        record.add_artifact("report_txt", &r.run_dir, "report.txt")?;
        println!("{}", report.to_text());
    }
    record.finish(&r.run_dir)?;
    if history.diverged {
        return Err(Error::Aborted(format!(
            "training diverged after {} epochs; weights from the last finite step were saved to {}",
            history.epochs.len(),
            checkpoint.display()
        )));
    }
    Ok(())
}

fn encode_for(model: &Classifier, manifest: &DatasetManifest, indices: &[usize], interpolation: Interpolation) -> Result<Batch> {
    let [h, w, _] = model.spec().input_shape;
    let pre = PreprocessConfig {
        height: h as u32,
        width: w as u32,
        interpolation,
        ..PreprocessConfig::default()
    };
    encode_indices(manifest, indices, &pre)
}

pub fn evaluate(
    checkpoint: &Path,
    manifest_path: &Path,
    split_path: Option<&Path>,
    subset: Option<Subset>,
    out: Option<&Path>,
    interpolation: Interpolation,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    if manifest.classes != model.classes() {
        return Err(Error::invalid(format!(
            "the checkpoint knows {} classes, the manifest has {}{}",
            model.classes().len(),
            manifest.num_classes(),
            if model.classes().len() == manifest.num_classes() {
                " with different names"
            } else {
                ""
            }
        )));
    }
    let indices: Vec<usize> = match (split_path, subset) {
        (None, None | Some(Subset::All)) => (0..manifest.len()).collect(),
        (None, Some(_)) => return Err(Error::invalid("--subset train/test needs --split")),
        (Some(p), s) => {
            let split: SplitAssignment = read_json(p)?;
            match s.unwrap_or(Subset::Test) {
                Subset::Train => split.train_indices,
                Subset::Test => split.test_indices,
                Subset::All => (0..manifest.len()).collect(),
            }
        }
    };
    if indices.iter().any(|&i| i >= manifest.len()) {
        return Err(Error::invalid("the split refers to records outside the manifest"));
    }
    if indices.is_empty() {
        return Err(Error::invalid("nothing to evaluate: the selected subset is empty"));
    }
    let batch = encode_for(&model, &manifest, &indices, interpolation)?;
    let report = evaluator::evaluate(&model, &batch)?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    write_report(&report, &dir)?;
    println!("{}", report.to_text());
    Ok(())
}

pub fn crossval(args: &RunArgs, k: Option<usize>) -> Result<()> {
    let mut r = resolve(args)?;
    if let Some(k) = k {
        r.config.cv.k = k;
        r.overrides.push(format!("cv.k={k}"));
        r.config.validate()?;
    }
    if r.config.split_first {
        log::warn!("split_first does not apply to cross-validation; the whole corpus is rebalanced before folding");
    }
    let mut record = start_record("crossval", &r)?;
    let c = &r.config;
    let (manifest, _) = prepare_data(
        &Resolved {
            config: RunConfig {
                split_first: false,
                split: crate::config::SplitConfig {
                    ratio: 1.0,
                    ..c.split.clone()
                },
                ..c.clone()
            },
            snapshot: String::new(),
            overrides: Vec::new(),
            run_dir: r.run_dir.clone(),
        },
        &mut record,
    )?;
    // Validate the fold count before any training starts.
    kfold_partition(&manifest, c.cv.k, 0, false)?;
    let report = cross_validate(
        &manifest,
        &c.model,
        &training_config(c),
        &c.preprocess,
        c.cv.k,
        c.stage_seed(Stage::CrossVal),
    )?;
    write_text(&r.run_dir.join("cv.json"), &report.to_json())?;
    write_text(&r.run_dir.join("cv.csv"), &report.to_csv())?;
    record.add_artifact("cv_json", &r.run_dir, "cv.json")?;
    record.add_artifact("cv_csv", &r.run_dir, "cv.csv")?;
    record.finish(&r.run_dir)?;
    print!("{}", report.to_csv());
    match report.aborted {
        Some(why) => Err(Error::Aborted(format!("cross-validation stopped early: {why}"))),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct Ranked<'a> {
    class: &'a str,
    probability: f32,
}

pub fn predict(checkpoint: &Path, image: &Path, top: usize, json: bool, interpolation: Interpolation) -> Result<()> {
    if top == 0 {
        return Err(Error::invalid("--top must be at least 1"));
    }
    let model = load_checkpoint(checkpoint)?;
    let [h, w, c] = model.spec().input_shape;
    let pre = PreprocessConfig {
        height: h as u32,
        width: w as u32,
        interpolation,
        ..PreprocessConfig::default()
    };
    let img = resize_image(&load_rgb(image)?, &pre)?;
    let probs = model.predict(&Tensor::from_vec(&[1, h, w, c], normalize(&img))?)?;
    let row = probs.row(0);
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let ranked: Vec<Ranked> = order
        .iter()
        .take(top)
        .map(|&i| Ranked {
            class: &model.classes()[i],
            probability: row[i],
        })
        .collect();
    if json {
        println!("{}", serde_json::to_string_pretty(&ranked).expect("ranking serialises"));
    } else {
        for r in &ranked {
            println!("{:.6}\t{}", r.probability, r.class);
        }
    }
    Ok(())
}

struct SweepRow {
    epoch: usize,
    train_loss: f64,
    train_accuracy: f64,
    test_accuracy: Option<f64>,
    test_precision: Option<f64>,
    test_recall: Option<f64>,
    test_f1: Option<f64>,
}

pub fn sweep(args: &RunArgs, checkpoints: &[usize]) -> Result<()> {
    let r = resolve(args)?;
    let mut record = start_record("sweep-epochs", &r)?;
    let (manifest, split) = prepare_data(&r, &mut record)?;
    let c = &r.config;
    let train_batch = encode_indices(&manifest, &split.train_indices, &c.preprocess)?;
    let test_batch = encode_indices(&manifest, &split.test_indices, &c.preprocess)?;
    let mut model = new_model(c, &manifest)?;
    let eval = (!test_batch.is_empty()).then_some(&test_batch);
    let (history, points) = sweep_epochs(&mut model, &train_batch, &training_config(c), eval, checkpoints)?;
    let rows: Vec<SweepRow> = points
        .iter()
        .map(|p| SweepRow {
            epoch: p.epoch,
            train_loss: p.train_loss,
            train_accuracy: p.train_accuracy,
            test_accuracy: p.report.as_ref().map(|r| r.headline.accuracy),
            test_precision: p.report.as_ref().map(|r| r.headline.precision),
            test_recall: p.report.as_ref().map(|r| r.headline.recall),
            test_f1: p.report.as_ref().map(|r| r.headline.f1),
        })
        .collect();
    write_json(&r.run_dir.join("sweep.json"), &points)?;
    record.add_artifact("sweep", &r.run_dir, "sweep.json")?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!("epoch\ttrain_loss\ttrain_acc\ttest_acc\ttest_precision\ttest_recall\ttest_f1");
    for row in &rows {
        println!(
            "{}\t{:.4}\t{:.4}\t{}\t{}\t{}\t{}",
            row.epoch,
            row.train_loss,
            row.train_accuracy,
            fmt(row.test_accuracy),
            fmt(row.test_precision),
            fmt(row.test_recall),
            fmt(row.test_f1)
        );
    }
    write_history(&history, &r.run_dir, &mut record)?;
    record.finish(&r.run_dir)?;
    Ok(())
}
