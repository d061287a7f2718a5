//! Fine-tuning with Adam and categorical cross-entropy, per-epoch history, plots.

use std::path::{Path, PathBuf};
use std::time::Instant;

use barkid_nn::{derive_seed, derive_seed_n, rng_for, Adam, GradSeed, Grads, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{accuracy, argmax_rows, evaluate, EvaluationReport};
use crate::model::Classifier;
use crate::preprocess::{one_hot_indices, Batch};

/// Probabilities are clipped to `[ε, 1 − ε]` before the log, as Keras does.
const LOSS_EPSILON: f32 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply the rate by `factor` after `patience` epochs without improvement
    /// of the monitored loss (validation loss when available, else training loss).
    Plateau { factor: f32, patience: usize, min_lr: f32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    /// Images per forward/backward pass when the backbone is trained; gradients of
    /// the micro-batches are summed into one optimiser step per batch.
    pub micro_batch: usize,
    /// Record per-epoch wall time. Disable for byte-identical histories.
    pub record_wall_time: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 32,
            batch_size: 32,
            seed: 0,
            schedule: LrSchedule::Constant,
            micro_batch: 4,
            record_wall_time: true,
        }
    }
}

impl TrainingConfig {
    /// A zero learning rate is accepted with a warning unless `strict`.
    pub fn validate(&self, strict: bool) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.learning_rate == 0.0 {
            if strict {
                return Err(Error::invalid("learning_rate must be positive, got 0"));
            }
            log::warn!("learning_rate is 0; weights will not change");
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::invalid("batch_size and micro_batch must be at least 1"));
        }
        if let LrSchedule::Plateau { factor, min_lr, .. } = self.schedule {
            if !(factor > 0.0 && factor < 1.0) || min_lr.is_nan() || min_lr < 0.0 {
                return Err(Error::invalid("plateau schedule needs 0 < factor < 1 and min_lr >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
    pub learning_rate: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Training stopped because the loss or gradients became non-finite; the
    /// model keeps the weights from before the offending step.
    pub diverged: bool,
    /// Where the final weights were saved, if they were.
    pub weights: Option<PathBuf>,
}

/// Mean clipped cross-entropy of probability rows against one-hot labels.
pub fn cross_entropy(probs: &Tensor, labels: &Tensor) -> f64 {
    let n = probs.batch();
    let total: f64 = (0..n)
        .map(|i| {
            let (p, y) = (probs.row(i), labels.row(i));
            p.iter()
                .zip(y)
                .filter(|(_, &t)| t != 0.0)
                .map(|(&q, &t)| -f64::from(t) * f64::from(q.clamp(LOSS_EPSILON, 1.0 - LOSS_EPSILON)).ln())
                .sum::<f64>()
        })
        .sum();
    total / n.max(1) as f64
}

/// Train `model` in place. Mini-batch order is reshuffled every epoch from the seed.
pub fn train(model: &mut Classifier, train_batch: &Batch, config: &TrainingConfig, val: Option<&Batch>) -> Result<TrainingHistory> {
    train_with(model, train_batch, config, val, |_, _| Ok(()))
}

/// [`train`] with a callback after every completed epoch.
pub fn train_with(
    model: &mut Classifier,
    train_batch: &Batch,
    config: &TrainingConfig,
    val: Option<&Batch>,
    mut on_epoch: impl FnMut(&EpochRecord, &Classifier) -> Result<()>,
) -> Result<TrainingHistory> {
    config.validate(false)?;
    check_batch(model, train_batch, "training")?;
    if let Some(v) = val {
        check_batch(model, v, "validation")?;
    }
    if train_batch.is_empty() {
        return Err(Error::invalid("training batch is empty"));
    }

    let labels = &train_batch.labels;
    let truth = one_hot_indices(labels);
    let n = train_batch.len();
    let train_backbone = model.backbone_trainable();
    // A frozen backbone is a fixed function of the input, so its features are computed once.
    let cached = if train_backbone {
        None
    } else {
        Some(model.features(&train_batch.inputs)?)
    };
    let val_features = match (val, train_backbone) {
        (Some(v), false) => Some(model.features(&v.inputs)?),
        _ => None,
    };

    let mut adam_backbone = Adam::new(config.learning_rate);
    let mut adam_head = Adam::new(config.learning_rate);
    let mut grads_backbone = Grads::for_store(model.backbone().params());
    let mut grads_head = Grads::for_store(model.head().params());
    let mut dropout_rng = rng_for(config.seed, "dropout");
    let shuffle_seed = derive_seed(config.seed, "shuffle");
    let mut plateau = PlateauState::new(config.learning_rate);
    let mut history = TrainingHistory::default();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(derive_seed_n(shuffle_seed, epoch as u64), "epoch"));
        let lr = plateau.lr;
        adam_backbone.learning_rate = lr;
        adam_head.learning_rate = lr;

        let mut loss_sum = 0.0f64;
        let mut predicted = vec![0usize; n];
        let mut diverged = false;
        for rows in order.chunks(config.batch_size) {
            grads_head.zero();
            grads_backbone.zero();
            let scale = 1.0 / rows.len() as f32;
            let micro = if cached.is_some() { rows.len() } else { config.micro_batch };
            let mut batch_loss = 0.0f64;
            for part in rows.chunks(micro) {
                let y = labels.gather_rows(part);
                let (features, backbone_tape) = match &cached {
                    Some(f) => (f.gather_rows(part), None),
                    None => {
                        let x = model.adapt_input(train_batch.inputs.gather_rows(part));
                        let tape = model.backbone().forward_train(x, &mut dropout_rng)?;
                        (tape.output().clone(), Some(tape))
                    }
                };
                let tape = model.head().forward_train(features, &mut dropout_rng)?;
                let probs = tape.output();
                batch_loss += cross_entropy(probs, &y) * part.len() as f64;
                for (&row, p) in part.iter().zip(argmax_rows(probs)) {
                    predicted[row] = p;
                }
                // Softmax + cross-entropy: d(mean loss)/d(logits) = (p − y) / |batch|.
                let mut seed = probs.clone();
                for (s, t) in seed.data_mut().iter_mut().zip(y.data()) {
                    *s = (*s - t) * scale;
                }
                let dfeatures = model
                    .head()
                    .backward(tape, GradSeed::Logits(seed), &mut grads_head, backbone_tape.is_some())?;
                if let (Some(bt), Some(df)) = (backbone_tape, dfeatures) {
                    model.backbone().backward(bt, GradSeed::Output(df), &mut grads_backbone, false)?;
                }
            }
            if !batch_loss.is_finite() || !grads_head.all_finite() || !grads_backbone.all_finite() {
                diverged = true;
                break;
            }
            loss_sum += batch_loss;
            adam_head.step(model.head_mut().params_mut(), &grads_head);
            if train_backbone {
                adam_backbone.step(model.backbone_mut().params_mut(), &grads_backbone);
            }
        }
        if diverged {
            log::error!("epoch {epoch}: loss became non-finite; stopping");
            history.diverged = true;
            break;
        }

        let train_loss = loss_sum / n as f64;
        let train_accuracy = accuracy(&truth, &predicted, model.num_classes())?;
        let (val_loss, val_accuracy) = match val {
            Some(v) if !v.is_empty() => {
                let probs = match &val_features {
                    Some(f) => model.predict_features(f)?,
                    None => model.predict(&v.inputs)?,
                };
                let report = crate::evaluator::report_from_probabilities(&probs, &v.labels, &v.classes)?;
                (Some(cross_entropy(&probs, &v.labels)), Some(report.accuracy))
            }
            _ => (None, None),
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
            seconds: if config.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
            learning_rate: lr,
        };
        log::info!(
            "epoch {epoch}/{}: loss {train_loss:.4} acc {train_accuracy:.4}{}",
            config.epochs,
            match (val_loss, val_accuracy) {
                (Some(l), Some(a)) => format!(" val_loss {l:.4} val_acc {a:.4}"),
                _ => String::new(),
            }
        );
        if let LrSchedule::Plateau {
            factor,
            patience,
            min_lr,
        } = config.schedule
        {
            plateau.observe(val_loss.unwrap_or(train_loss), factor, patience, min_lr);
        }
        on_epoch(&record, model)?;
        history.epochs.push(record);
    }
    Ok(history)
}

fn check_batch(model: &Classifier, batch: &Batch, what: &str) -> Result<()> {
    let shape = batch.inputs.shape();
    if shape.len() != 4 || shape[1..] != model.spec().input_shape {
        return Err(Error::invalid(format!(
            "{what} inputs have shape {shape:?}; the model expects [N, {:?}]",
            model.spec().input_shape
        )));
    }
    if batch.labels.shape() != [batch.len(), model.num_classes()] {
        return Err(Error::invalid(format!(
            "{what} labels have shape {:?}; the model has {} classes",
            batch.labels.shape(),
            model.num_classes()
        )));
    }
    Ok(())
}

struct PlateauState {
    lr: f32,
    best: f64,
    waited: usize,
}

impl PlateauState {
    fn new(lr: f32) -> Self {
        Self {
            lr,
            best: f64::INFINITY,
            waited: 0,
        }
    }

    fn observe(&mut self, loss: f64, factor: f32, patience: usize, min_lr: f32) {
        if loss < self.best {
            self.best = loss;
            self.waited = 0;
            return;
        }
        self.waited += 1;
        if self.waited > patience {
            let next = (self.lr * factor).max(min_lr);
            if next < self.lr {
                log::info!("plateau: learning rate {} -> {next}", self.lr);
            }
            self.lr = next;
            self.waited = 0;
        }
    }
}

/// Metrics captured at one epoch of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub report: Option<EvaluationReport>,
}

/// Train once for `max(checkpoints)` epochs, evaluating on `eval` whenever a
/// checkpoint epoch completes.
pub fn sweep_epochs(
    model: &mut Classifier,
    train_batch: &Batch,
    config: &TrainingConfig,
    eval: Option<&Batch>,
    checkpoints: &[usize],
) -> Result<(TrainingHistory, Vec<SweepPoint>)> {
    let last = *checkpoints
        .iter()
        .max()
        .ok_or_else(|| Error::invalid("sweep needs at least one checkpoint epoch"))?;
    if checkpoints.contains(&0) {
        return Err(Error::invalid("sweep checkpoints are 1-based epochs"));
    }
    let config = TrainingConfig {
        epochs: last,
        ..config.clone()
    };
    let mut points = Vec::new();
    let history = train_with(model, train_batch, &config, None, |rec, m| {
        if checkpoints.contains(&rec.epoch) {
            let report = eval.map(|b| evaluate(m, b)).transpose()?;
            points.push(SweepPoint {
                epoch: rec.epoch,
                train_loss: rec.train_loss,
                train_accuracy: rec.train_accuracy,
                report,
            });
        }
        Ok(())
    })?;
    Ok((history, points))
}

pub const HISTORY_COLUMNS: [&str; 6] = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV with [`HISTORY_COLUMNS`]; floats use shortest round-trip formatting so a
/// reload reproduces every value exactly.
pub fn history_to_csv(history: &TrainingHistory) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HISTORY_COLUMNS).expect("in-memory write");
    for e in &history.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.train_accuracy.to_string(),
            fmt_opt(e.val_loss),
            fmt_opt(e.val_accuracy),
            e.seconds.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Inverse of [`history_to_csv`]. Learning rates are not stored and come back as 0.
pub fn history_from_csv(text: &str) -> Result<TrainingHistory> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| Error::invalid(format!("history csv: {e}")))?.clone();
    if headers.iter().ne(HISTORY_COLUMNS) {
        return Err(Error::invalid(format!("history csv has columns {headers:?}")));
    }
    let bad = |what: &str, e: &dyn std::fmt::Display| Error::invalid(format!("history csv {what}: {e}"));
    let num = |s: &str| -> Result<f64> { s.parse::<f64>().map_err(|e| bad("value", &e)) };
    let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
    let mut epochs = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad("row", &e))?;
        epochs.push(EpochRecord {
            epoch: rec[0].parse().map_err(|e| bad("epoch", &e))?,
            train_loss: num(&rec[1])?,
            train_accuracy: num(&rec[2])?,
            val_loss: opt(&rec[3])?,
            val_accuracy: opt(&rec[4])?,
            seconds: num(&rec[5])?,
            learning_rate: 0.0,
        });
    }
    Ok(TrainingHistory {
        epochs,
        diverged: false,
        weights: None,
    })
}

/// Files written by [`plot_history`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlotArtifacts {
    pub accuracy_png: PathBuf,
    pub loss_png: PathBuf,
    pub csv: PathBuf,
}

/// Accuracy-vs-epoch and loss-vs-epoch PNGs plus the raw series as CSV, in `out_dir`.
pub fn plot_history(history: &TrainingHistory, out_dir: &Path) -> Result<PlotArtifacts> {
    if history.epochs.is_empty() {
        return Err(Error::invalid("cannot plot an empty history"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let artifacts = PlotArtifacts {
        accuracy_png: out_dir.join("accuracy.png"),
        loss_png: out_dir.join("loss.png"),
        csv: out_dir.join("history.csv"),
    };
    let epochs: Vec<f64> = history.epochs.iter().map(|e| e.epoch as f64).collect();
    let series = |f: fn(&EpochRecord) -> Option<f64>| -> Vec<Option<f64>> { history.epochs.iter().map(f).collect() };
    crate::plot::line_chart(
        &artifacts.accuracy_png,
        "Model accuracy",
        "accuracy",
        &epochs,
        &[
            ("train", series(|e| Some(e.train_accuracy))),
            ("validation", series(|e| e.val_accuracy)),
        ],
    )?;
    crate::plot::line_chart(
        &artifacts.loss_png,
        "Model loss",
        "loss",
        &epochs,
        &[
            ("train", series(|e| Some(e.train_loss))),
            ("validation", series(|e| e.val_loss)),
        ],
    )?;
    std::fs::write(&artifacts.csv, history_to_csv(history)).map_err(|e| Error::io(&artifacts.csv, e))?;
    Ok(artifacts)
}
