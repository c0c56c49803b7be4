//! Training loop, evaluation and ablation sweeps.

pub mod config;
pub mod data;
pub mod schedule;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::ShortcutKind;
use crate::autograd::Graph;
use crate::binary::{build_model, load_checkpoint, save_checkpoint, InferencePath, Model, ParamKind};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::tensor::Tensor;

pub use config::{AdapterPlacement, ScheduleKind, TrainConfig};
pub use data::{Dataset, DatasetKind, Split};
pub use schedule::{alpha_at, LrSchedule, ScheduleSetting};

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc,n_terms,alpha,seconds";
const EVAL_BATCH: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub train_loss: f64,
    /// Percent.
    pub train_acc: f64,
    /// Percent, packed inference path.
    pub test_acc: f64,
    pub n_terms: usize,
    pub alpha: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.4},{:.4},{},{:.6},{:.3}",
            self.epoch, self.train_loss, self.train_acc, self.test_acc, self.n_terms, self.alpha, self.seconds
        )
    }
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub history: Vec<EpochMetrics>,
    pub model: Model<f32>,
}

impl RunArtifacts {
    pub fn final_test_acc(&self) -> f64 {
        self.history.last().map_or(0.0, |m| m.test_acc)
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Top-1 accuracy in percent.
pub fn accuracy(model: &Model<f32>, ds: &Dataset, path: InferencePath) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = ds.batch(chunk, None);
        correct += count_correct(&model.forward_eval(&x, path)?, &y);
    }
    Ok(100.0 * correct as f64 / ds.len() as f64)
}

/// Loads both splits named by `cfg`, honouring the subset limits.
pub fn load_splits(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let mut train = Dataset::load(cfg.dataset, &cfg.data_dir, Split::Train)?;
    let mut test = Dataset::load(cfg.dataset, &cfg.data_dir, Split::Test)?;
    train.truncate(cfg.train_limit);
    test.truncate(cfg.test_limit);
    Ok((train, test))
}

pub fn train(cfg: &TrainConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let (train_set, test_set) = load_splits(cfg)?;
    train_on(cfg, &train_set, &test_set, &mut |_| {})
}

/// Runs the full schedule on already loaded data, writing `metrics.csv`,
/// `config.txt` and `model.ckpt` into `cfg.output_dir`.
pub fn train_on(
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    progress: &mut dyn FnMut(&EpochMetrics),
) -> Result<RunArtifacts> {
    cfg.validate()?;
    if train_set.kind != cfg.dataset || test_set.kind != cfg.dataset {
        return Err(Error::Config(
            "loaded data does not match the configured dataset".into(),
        ));
    }
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.txt"), cfg.to_text())?;
    let metrics_path = cfg.output_dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path)?;
    writeln!(metrics, "{METRICS_HEADER}")?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);

    let mut model: Model<f32> = build_model(&cfg.model_config()?, &mut init_rng)?;
    let mut opt = Optimizer::<f32>::new(cfg.optimizer_settings())?;
    let schedule = cfg.schedule();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut g = Graph::new();
    let mut history = Vec::new();
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let n = schedule.n_at(epoch, cfg.epochs)?;
        let alpha = alpha_at(cfg.alpha0, epoch, cfg.epochs)?;
        model.set_schedule(n, alpha);
        opt.set_lr(cfg.lr_schedule.lr_at(cfg.lr, epoch, cfg.epochs))?;
        order.shuffle(&mut order_rng);

        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let aug: Option<&mut dyn rand::RngCore> = if cfg.augment { Some(&mut aug_rng) } else { None };
            let (x, labels) = train_set.batch(idx, aug);
            g.reset();
            let xv = g.constant(x)?;
            let fwd = model.forward_train(&mut g, xv).map_err(numerical)?;
            let loss = g.softmax_cross_entropy(fwd.logits, &labels).map_err(numerical)?;
            let lv = g.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {}", epoch + 1)));
            }
            loss_sum += lv * idx.len() as f64;
            correct += count_correct(g.value(fwd.logits), &labels);
            g.backward(loss).map_err(numerical)?;
            let grads = fwd
                .params
                .iter()
                .enumerate()
                .map(|(i, &v)| g.take_grad(v).ok_or(Error::MissingGradient(i)))
                .collect::<Result<Vec<_>>>()?;
            apply_update(&mut model, &mut opt, &grads)?;
            model.clip_binary_weights();
        }

        let test_acc = accuracy(&model, test_set, InferencePath::Packed)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: 100.0 * correct as f64 / train_set.len() as f64,
            test_acc,
            n_terms: n,
            alpha,
            seconds: if cfg.record_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        writeln!(metrics, "{}", m.csv_row())?;
        metrics.flush()?;
        progress(&m);
        history.push(m);
    }

    let checkpoint_path = cfg.output_dir.join("model.ckpt");
    let mut meta = BTreeMap::new();
    meta.insert("dataset".to_string(), cfg.dataset.label().to_string());
    meta.insert("epochs".to_string(), cfg.epochs.to_string());
    meta.insert("seed".to_string(), cfg.seed.to_string());
    save_checkpoint(&checkpoint_path, &mut model, &meta)?;
    Ok(RunArtifacts {
        metrics_path,
        checkpoint_path,
        history,
        model,
    })
}

fn numerical(e: Error) -> Error {
    match e {
        Error::NonFinite { op, index } => Error::Numerical(format!("non-finite value in {op} at index {index}")),
        other => other,
    }
}

fn apply_update(model: &mut Model<f32>, opt: &mut Optimizer<f32>, grads: &[Vec<f32>]) -> Result<()> {
    opt.begin_step();
    let mut i = 0;
    let mut failure = None;
    model.visit(&mut |_, t, kind| {
        if !kind.trainable() || failure.is_some() {
            return;
        }
        match grads.get(i) {
            Some(g) => {
                if let Err(e) = opt.update(i, t.data_mut(), g, kind == ParamKind::Weight) {
                    failure = Some(e);
                }
            }
            None => failure = Some(Error::MissingGradient(i)),
        }
        i += 1;
    });
    match failure {
        Some(e) => Err(e),
        None if i != grads.len() => Err(Error::invalid(format!("{} gradients for {i} parameters", grads.len()))),
        None => Ok(()),
    }
}

/// Test accuracy (percent) of a saved model on the test split found in
/// `dataset_dir`, through the packed inference path.
pub fn evaluate(checkpoint: &Path, dataset_dir: &Path, limit: usize) -> Result<f64> {
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let c = ck.model.config;
    let kind = match (c.in_channels, c.image_size) {
        (1, 28) => DatasetKind::Mnist,
        (3, 32) => DatasetKind::Cifar10,
        (ch, s) => {
            return Err(Error::Geometry(format!(
                "no dataset matches a {ch}-channel {s}x{s} model input"
            )))
        }
    };
    if let Some(name) = ck.meta.get("dataset") {
        if name != kind.label() {
            return Err(Error::Checkpoint(format!(
                "checkpoint trained on '{name}', geometry says '{}'",
                kind.label()
            )));
        }
    }
    let mut test = Dataset::load(kind, dataset_dir, Split::Test)?;
    test.truncate(limit);
    accuracy(&ck.model, &test, InferencePath::Packed)
}

/// Named ablation grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    /// {STE, Fourier} × {adapter off, on}.
    SurrogateAdapter,
    /// {tanh-alike, SignSwish, Fourier} × {adapter off, on}.
    PluggedAdapter,
    /// Shortcut ∈ {zero, linear, sine} with the Fourier surrogate and adapter.
    Shortcut,
}

impl Grid {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "surrogate_adapter" => Some(Grid::SurrogateAdapter),
            "plugged_adapter" => Some(Grid::PluggedAdapter),
            "shortcut" => Some(Grid::Shortcut),
            _ => None,
        }
    }

    /// `(variant name, config overrides)`.
    pub fn variants(self) -> Vec<(String, Vec<(String, String)>)> {
        let kv = |pairs: &[(&str, &str)]| pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let cross = |surrogates: &[&str]| {
            let mut out = Vec::new();
            for s in surrogates {
                for a in ["none", "both"] {
                    out.push((format!("{s}-adapter_{a}"), kv(&[("surrogate", s), ("adapter", a)])));
                }
            }
            out
        };
        match self {
            Grid::SurrogateAdapter => cross(&["ste", "fda"]),
            Grid::PluggedAdapter => cross(&["tanh", "signswish", "fda"]),
            Grid::Shortcut => [ShortcutKind::Zero, ShortcutKind::Linear, ShortcutKind::Sine]
                .iter()
                .map(|s| {
                    (
                        format!("fda-shortcut_{}", s.label()),
                        kv(&[("surrogate", "fda"), ("adapter", "both"), ("shortcut", s.label())]),
                    )
                })
                .collect(),
        }
    }
}

pub const SWEEP_HEADER: &str = "variant,surrogate,adapter,shortcut,final_test_acc,best_test_acc";

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub grid: Grid,
    pub base: Vec<(String, String)>,
    pub output: Option<PathBuf>,
}

impl SweepSpec {
    /// A config file with two extra keys: `grid` (required) and
    /// `sweep_output` (defaults to `<output_dir>/sweep.csv`).
    pub fn parse(text: &str) -> Result<Self> {
        let mut grid = None;
        let mut output = None;
        let mut base = Vec::new();
        for (k, v) in config::parse_pairs(text)? {
            match k.as_str() {
                "grid" => grid = Some(Grid::parse(&v).ok_or_else(|| Error::Config(format!("unknown grid '{v}'")))?),
                "sweep_output" => output = Some(PathBuf::from(v)),
                _ => base.push((k, v)),
            }
        }
        let grid = grid.ok_or_else(|| Error::Config("sweep spec needs a 'grid' key".into()))?;
        TrainConfig::from_pairs(&base)?;
        Ok(SweepSpec { grid, base, output })
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub variant: String,
    pub config: TrainConfig,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
}

/// Runs every variant on the same data, seed and batch order and writes the
/// comparison CSV. Returns the CSV path and rows.
pub fn ablation_sweep(
    spec: &SweepSpec,
    progress: &mut dyn FnMut(&str, &EpochMetrics),
) -> Result<(PathBuf, Vec<SweepRow>)> {
    let base = TrainConfig::from_pairs(&spec.base)?;
    let (train_set, test_set) = load_splits(&base)?;
    let mut rows = Vec::new();
    for (name, overrides) in spec.grid.variants() {
        let mut pairs = spec.base.clone();
        pairs.extend(overrides);
        let mut cfg = TrainConfig::from_pairs(&pairs)?;
        cfg.output_dir = base.output_dir.join(&name);
        let run = train_on(&cfg, &train_set, &test_set, &mut |m| progress(&name, m))?;
        let best = run.history.iter().map(|m| m.test_acc).fold(f64::MIN, f64::max);
        rows.push(SweepRow {
            variant: name,
            final_test_acc: run.final_test_acc(),
            best_test_acc: best,
            config: cfg,
        });
    }
    let out = spec.output.clone().unwrap_or_else(|| base.output_dir.join("sweep.csv"));
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&out, sweep_csv(&rows))?;
    Ok((out, rows))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let shortcut = if r.config.adapter == AdapterPlacement::None {
            "-"
        } else {
            r.config.shortcut.label()
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{:.4},{:.4}",
            r.variant,
            r.config.surrogate,
            r.config.adapter.label(),
            shortcut,
            r.final_test_acc,
            r.best_test_acc
        );
    }
    s
}
