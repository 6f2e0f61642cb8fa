//! Training loop with validation-based model selection and early stopping.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use crate::dataio::{median_length, Batch, DataDir, Grid, Instance, Label, NormStats, TaskKind};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelDims, Warpformer};
use crate::nn::ForwardCtx;
use crate::tensor::{load_checkpoint, save_checkpoint, Adam, ParamStore, Tape, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RUN_FILE: &str = "run.toml";
pub const NORM_FILE: &str = "norm_stats.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Validation metric used for model selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// AUROC, or accuracy for per-step tasks.
    #[default]
    Auto,
    Auroc,
    Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 50,
            patience: 5,
            batch_size: 32,
            seed: 0,
            selection: Selection::Auto,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if self.patience == 0 || self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be in 1..max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Contents of a run configuration file: `[model]` and `[train]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.model.validate().map_err(|e| e.to_string())?;
        cfg.train.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

/// Everything needed to rebuild a trained model next to its checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub dims: ModelDims,
    /// Dataset the model was trained on, if known.
    pub data: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: Option<f64>,
    pub val_auprc: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub selection_score: f64,
    pub improved: bool,
}

pub struct Trained {
    pub model: Warpformer,
    /// Parameters of the best validation epoch.
    pub store: ParamStore,
    pub optimizer: Adam,
    pub norm: NormStats,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub seconds: f64,
}

/// Copies of the splits with values normalized by training statistics.
pub struct Prepared {
    pub norm: NormStats,
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
}

pub fn prepare(data: &DataDir) -> Prepared {
    let grids: Vec<&Grid> = data.train.iter().map(|i| &i.grid).collect();
    let norm = NormStats::fit(&grids, data.meta.num_variates);
    let normed = |split: &[Instance]| {
        let mut v = split.to_vec();
        norm.apply_all(&mut v);
        v
    };
    Prepared {
        train: normed(&data.train),
        val: normed(&data.val),
        test: normed(&data.test),
        norm,
    }
}

fn selection_score(report: &MetricsReport, task: TaskKind, sel: Selection) -> f64 {
    let acc = report.accuracy.unwrap_or(f64::NEG_INFINITY);
    match (sel, task) {
        (Selection::Accuracy, _) | (Selection::Auto, TaskKind::PerStep) => acc,
        _ => report.auroc.unwrap_or(acc),
    }
}

/// Trains on `data` and returns the best-validation parameters. `on_epoch`
/// sees every epoch record as it is produced.
pub fn train(cfg: &RunConfig, data: &DataDir, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<Trained> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let started = Instant::now();
    let tc = &cfg.train;
    let prepared = prepare(data);
    let dims = ModelDims {
        num_variates: data.meta.num_variates,
        num_classes: data.meta.num_classes,
        task: data.meta.task,
        median_length: median_length(&prepared.train),
    };
    let mut store = ParamStore::new();
    let model = Warpformer::new(cfg.model.clone(), dims, &mut store, tc.seed)?;
    let mut optimizer = Adam::new(tc.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0001);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0002);

    let mut order: Vec<usize> = (0..prepared.train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut stale = 0;
    for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let grids: Vec<&Grid> = chunk.iter().map(|&i| &prepared.train[i].grid).collect();
            let labels: Vec<&Label> = chunk.iter().map(|&i| &prepared.train[i].label).collect();
            let batch = Batch::new(&grids, None)?;
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx {
                dropout: cfg.model.dropout,
                rng: Some(&mut dropout_rng),
            };
            let out = model.forward(&mut tape, &store, &batch, &mut ctx)?;
            let loss = match model.loss(&mut tape, &out, &labels) {
                Err(Error::NonFiniteLoss) => return Err(Error::Divergence { epoch, batch: bi }),
                other => other?,
            };
            store.zero_grad();
            tape.backward(loss, &mut store)?;
            optimizer.step(&mut store)?;
            loss_sum += tape.value(loss).data()[0];
            batches += 1;
        }
        let report = evaluate(&model, &store, &prepared.val, tc.batch_size)?;
        let score = selection_score(&report, dims_task(&model), tc.selection);
        let improved = best.as_ref().is_none_or(|(b, _, _)| score > *b);
        if improved {
            let snapshot = store.iter().map(|(_, p)| p.value().clone()).collect();
            best = Some((score, epoch, snapshot));
            stale = 0;
        } else {
            stale += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_auroc: report.auroc,
            val_auprc: report.auprc,
            val_accuracy: report.accuracy,
            selection_score: score,
            improved,
        };
        on_epoch(&record);
        history.push(record);
        if stale >= tc.patience {
            break;
        }
    }
    let (_, best_epoch, snapshot) = best.expect("at least one epoch ran");
    let ids: Vec<_> = store.ids().collect();
    for (id, value) in ids.into_iter().zip(snapshot) {
        *store.value_mut(id) = value;
    }
    Ok(Trained {
        model,
        store,
        optimizer,
        norm: prepared.norm,
        history,
        best_epoch,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn dims_task(model: &Warpformer) -> TaskKind {
    model.dims.task
}

/// Probability rows for each instance; per-step tasks give one row per step.
pub fn predict(model: &Warpformer, store: &ParamStore, instances: &[Instance], batch_size: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let c = model.dims.num_classes;
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(batch_size.max(1)) {
        let grids: Vec<&Grid> = chunk.iter().map(|i| &i.grid).collect();
        let batch = Batch::new(&grids, None)?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, store, &batch, &mut ForwardCtx::eval())?;
        let probs = model.probabilities(&mut tape, &fwd)?;
        let per_instance = probs.len() / chunk.len();
        for row in probs.data().chunks(per_instance) {
            out.push(row.chunks(c).map(<[f64]>::to_vec).collect());
        }
    }
    Ok(out)
}

/// Metrics of the model on already-normalized instances.
pub fn evaluate(model: &Warpformer, store: &ParamStore, instances: &[Instance], batch_size: usize) -> Result<MetricsReport> {
    let probs = predict(model, store, instances, batch_size)?;
    match model.dims.task {
        TaskKind::Sequence => {
            let rows: Vec<Vec<f64>> = probs.into_iter().map(|mut p| p.remove(0)).collect();
            let labels = instances
                .iter()
                .map(|i| match &i.label {
                    Label::Class(y) => Ok(*y),
                    other => Err(Error::Config(format!("{}: expected a class label, got {other:?}", i.id))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricsReport::multiclass(&rows, &labels))
        }
        TaskKind::PerStep => {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (p, inst) in probs.into_iter().zip(instances) {
                let Label::Steps(ys) = &inst.label else {
                    return Err(Error::Config(format!("{}: expected per-step labels", inst.id)));
                };
                if ys.len() != p.len() {
                    return Err(Error::Config(format!(
                        "{}: {} step labels for {} outputs",
                        inst.id,
                        ys.len(),
                        p.len()
                    )));
                }
                rows.extend(p);
                labels.extend_from_slice(ys);
            }
            Ok(MetricsReport::multiclass(&rows, &labels))
        }
        TaskKind::MultiLabel => {
            let rows: Vec<Vec<f64>> = probs.into_iter().map(|mut p| p.remove(0)).collect();
            let labels = instances
                .iter()
                .map(|i| match &i.label {
                    Label::Multi(ys) => Ok(ys.clone()),
                    other => Err(Error::Config(format!("{}: expected label flags, got {other:?}", i.id))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricsReport::multilabel(&rows, &labels))
        }
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "na".to_string(), |v| format!("{v:.6}"))
}

/// One-line `key=value` summary of a run.
pub fn summary_line(trained: &Trained, seed: u64, test: Option<&MetricsReport>) -> String {
    let best = &trained.history[trained.best_epoch - 1];
    let mut line = format!(
        "seed={seed} epochs={} best_epoch={} val_auroc={} val_auprc={} val_accuracy={}",
        trained.history.len(),
        trained.best_epoch,
        fmt_opt(best.val_auroc),
        fmt_opt(best.val_auprc),
        fmt_opt(best.val_accuracy),
    );
    if let Some(t) = test {
        line.push_str(&format!(
            " test_auroc={} test_auprc={} test_accuracy={}",
            fmt_opt(t.auroc),
            fmt_opt(t.auprc),
            fmt_opt(t.accuracy)
        ));
    }
    line.push_str(&format!(" seconds={:.1}", trained.seconds));
    line
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["epoch", "train_loss", "val_auroc", "val_auprc", "val_accuracy", "selection_score", "improved"])
        .map_err(csv_err)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:?}", r.train_loss),
            fmt_opt(r.val_auroc),
            fmt_opt(r.val_auprc),
            fmt_opt(r.val_accuracy),
            format!("{:?}", r.selection_score),
            u8::from(r.improved).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

/// Writes checkpoint, run record, normalization statistics, history and the
/// summary line into `out`.
pub fn save_run(out: &Path, cfg: &RunConfig, trained: &Trained, data: Option<&Path>, summary: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &trained.store, Some(&trained.optimizer))?;
    let record = RunRecord {
        config: cfg.clone(),
        dims: trained.model.dims.clone(),
        data: data.map(|p| p.canonicalize().unwrap_or_else(|_| p.to_path_buf())),
    };
    let text = toml::to_string(&record).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out.join(RUN_FILE), text)?;
    trained.norm.save(&out.join(NORM_FILE))?;
    write_history(&out.join(HISTORY_FILE), &trained.history)?;
    fs::write(out.join(SUMMARY_FILE), format!("{summary}\n"))?;
    Ok(())
}

/// A trained model restored from disk.
pub struct LoadedRun {
    pub record: RunRecord,
    pub model: Warpformer,
    pub store: ParamStore,
    pub norm: NormStats,
}

/// Restores a model from a checkpoint file; the run record and statistics
/// are read from the same directory.
pub fn load_run(checkpoint: &Path) -> Result<LoadedRun> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(dir.join(RUN_FILE))?;
    let record: RunRecord =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", dir.join(RUN_FILE).display())))?;
    let mut store = ParamStore::new();
    let model = Warpformer::new(record.config.model.clone(), record.dims.clone(), &mut store, 0)?;
    let ck = load_checkpoint(checkpoint)?;
    if ck.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            ck.params.len(),
            store.len()
        )));
    }
    store.load_values(&ck.params)?;
    let norm = NormStats::load(&dir.join(NORM_FILE))?;
    Ok(LoadedRun {
        record,
        model,
        store,
        norm,
    })
}
