//! End-to-end drivers behind the CLI: dataset loading, the training loop
//! with checkpointing and JSON-lines metrics, evaluation, the cost-model
//! bench report, packed-bundle export, and checkpoint inspection.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{cosine_lr, Model, Slot};
use crate::bundle::{export_packed_model, Record};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::costmodel::{conv_cost, model_cost, CostMode};
use crate::data::{augment, load_cifar10, load_mnist, synthetic_dataset, Dataset};
use crate::error::{Error, Result};
use crate::layers::build_model;
use crate::tensor::Tensor;

/// Environment variable consulted when the config has no `data_dir`.
pub const DATA_ENV: &str = "ADABIN_DATA";

/// Number of images in the built-in synthetic train/test splits.
pub const SYNTH_TRAIN: usize = 2000;
pub const SYNTH_TEST: usize = 1000;

fn resolve_data_dir(cfg: &RunConfig) -> Result<PathBuf> {
    if !cfg.data_dir.is_empty() {
        return Ok(PathBuf::from(&cfg.data_dir));
    }
    match std::env::var(DATA_ENV) {
        Ok(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(Error::Config(format!(
            "dataset '{}' needs a data directory: set data_dir or the {DATA_ENV} environment variable",
            cfg.dataset
        ))),
    }
}

/// Load the configured train/test splits. `synthetic` is generated
/// in-process and needs no files on disk.
pub fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset.as_str() {
        "synthetic" => {
            let side = cfg.image_side();
            let train = synthetic_dataset(SYNTH_TRAIN, cfg.in_channels(), side, 10, cfg.seed);
            let test = synthetic_dataset(SYNTH_TEST, cfg.in_channels(), side, 10, cfg.seed + 1);
            Ok((train, test))
        }
        "cifar10" => load_cifar10(resolve_data_dir(cfg)?),
        "mnist" => load_mnist(resolve_data_dir(cfg)?),
        other => Err(Error::Config(format!("unknown dataset '{other}'"))),
    }
}

/// Per-layer activation quantizer state, logged once per epoch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QuantStat {
    pub layer: String,
    pub alpha_a: f32,
    pub beta_a: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f32,
    pub test_acc: f32,
    pub quantizers: Vec<QuantStat>,
}

pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub best_acc: f32,
    pub model: Model,
    pub out_dir: PathBuf,
}

/// Read the (alpha_a, beta_a) pairs of every binary conv, in layer order.
pub fn quantizer_stats(model: &mut Model) -> Vec<QuantStat> {
    let mut stats: Vec<QuantStat> = Vec::new();
    model.visit(&mut |name, slot| {
        if let Slot::Param(p) = slot {
            if let Some(prefix) = name.strip_suffix(".a_alpha") {
                stats.push(QuantStat {
                    layer: prefix.to_string(),
                    alpha_a: p.value.item(),
                    beta_a: 0.0,
                });
            } else if let Some(prefix) = name.strip_suffix(".a_beta") {
                if let Some(s) = stats.iter_mut().find(|s| s.layer == prefix) {
                    s.beta_a = p.value.item();
                }
            }
        }
    });
    stats
}

/// Top-1 accuracy of `model` on `ds`, evaluated in inference mode.
pub fn accuracy(model: &mut Model, ds: &Dataset, batch: usize) -> Result<f32> {
    Ok(evaluate(model, ds, batch)?.top1)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub top1: f32,
    /// (correct, total) per class label.
    pub per_class: Vec<(usize, usize)>,
}

pub fn evaluate(model: &mut Model, ds: &Dataset, batch: usize) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let mut per_class = vec![(0usize, 0usize); ds.classes];
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let (raw, labels) = ds.batch_raw(chunk)?;
        let x = ds.normalize(&raw);
        let logits = model.forward_logits(&x, false)?;
        let classes = logits.shape()[logits.shape().len() - 1];
        if classes != ds.classes {
            return Err(Error::InvalidArgument(format!(
                "model predicts {classes} classes but the dataset has {}",
                ds.classes
            )));
        }
        for (row, &label) in labels.iter().enumerate() {
            per_class[label].1 += 1;
            if argmax_row(&logits, row) == label {
                per_class[label].0 += 1;
            }
        }
    }
    let correct: usize = per_class.iter().map(|c| c.0).sum();
    let total: usize = per_class.iter().map(|c| c.1).sum();
    Ok(EvalReport { top1: correct as f32 / total as f32, per_class })
}

fn argmax_row(logits: &Tensor, row: usize) -> usize {
    let classes = logits.shape()[logits.shape().len() - 1];
    let data = &logits.data()[row * classes..(row + 1) * classes];
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    best
}

/// Train from scratch according to `cfg`. Writes `config.txt`,
/// `metrics.jsonl`, `last.ckpt`, and `best.ckpt` into `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_from(cfg, None)
}

/// Resume-capable training entry point. When a checkpoint is given, the
/// model, data-order RNG, and epoch counter pick up exactly where it
/// stopped; the continued run is bitwise identical to an uninterrupted one.
pub fn train_from(cfg: &RunConfig, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("config.txt"), cfg.snapshot())?;

    let (mut train_ds, test_ds) = load_dataset(cfg)?;
    if cfg.subset > 0 && cfg.subset < train_ds.len() {
        train_ds = train_ds.stratified_subset(cfg.subset, cfg.seed)?;
    }

    let mut model = build_model(&cfg.model_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut start_epoch = 0;
    if let Some(ck) = resume {
        ck.restore_into(&mut model)?;
        rng = ck.rng();
        start_epoch = ck.epoch;
        if start_epoch > cfg.epochs {
            return Err(Error::Config(format!(
                "checkpoint is at epoch {start_epoch} but the run has only {} epochs",
                cfg.epochs
            )));
        }
    }

    let mut metrics_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("metrics.jsonl"))?;
    let mut metrics = Vec::new();
    let mut best_acc = f32::NEG_INFINITY;

    for epoch in start_epoch..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)?;
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (raw, labels) = train_ds.batch_raw(chunk)?;
            let aug = augment(&train_ds, &raw, &mut rng)?;
            let x = train_ds.normalize(&aug);
            model.zero_grads();
            let (loss, _) = model.forward(&x, &labels, true)?;
            model.backward()?;
            model.sgd_step(lr, cfg.momentum, cfg.weight_decay)?;
            loss_sum += loss as f64 * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = (loss_sum / seen as f64) as f32;
        let test_acc = accuracy(&mut model, &test_ds, cfg.batch_size)?;

        let entry = EpochMetrics {
            epoch,
            lr,
            train_loss,
            test_acc,
            quantizers: quantizer_stats(&mut model),
        };
        writeln!(metrics_file, "{}", serde_json::to_string(&entry)?)?;
        metrics.push(entry);

        let ck = Checkpoint::capture(cfg, epoch + 1, &mut model, &rng);
        ck.save(out_dir.join("last.ckpt"))?;
        if test_acc > best_acc {
            best_acc = test_acc;
            ck.save(out_dir.join("best.ckpt"))?;
        }
    }

    Ok(TrainOutcome { metrics, best_acc, model, out_dir })
}

/// Rebuild the model recorded in a checkpoint and restore its state.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, Model)> {
    let cfg = ck.config()?;
    let mut model = build_model(&cfg.model_config())?;
    ck.restore_into(&mut model)?;
    Ok((cfg, model))
}

/// Cost report: one row per layer plus totals and a fixed canonical
/// self-test row (a 256->256 3x3 conv on a 14x14 map). Returns the
/// human-readable table and the same content as JSON lines.
pub fn bench(cfg: &RunConfig) -> Result<(String, Vec<serde_json::Value>)> {
    let model = build_model(&cfg.model_config())?;
    let shape = [1, cfg.in_channels(), cfg.image_side(), cfg.image_side()];
    let cost = model_cost(&model.layers, &shape)?;

    let mut text = String::new();
    let mut lines = Vec::new();
    text.push_str(&format!(
        "{:<26} {:>14} {:>14} {:>12} {:>14}\n",
        "layer", "float_ops", "binary_ops", "ops(total)", "param_bits"
    ));
    for e in &cost.entries {
        text.push_str(&format!(
            "{:<26} {:>14} {:>14} {:>12.1} {:>14}\n",
            e.name,
            e.cost.float_ops + e.cost.extra_float_ops,
            e.cost.binary_ops,
            e.cost.total_ops(),
            e.cost.total_bits()
        ));
        lines.push(json!({
            "kind": "layer",
            "name": e.name,
            "float_ops": e.cost.float_ops + e.cost.extra_float_ops,
            "binary_ops": e.cost.binary_ops,
            "total_ops": e.cost.total_ops(),
            "param_bits": e.cost.total_bits(),
        }));
    }
    text.push_str(&format!(
        "total ops {:.3e} (float reference {:.3e}), speedup {:.2}x, memory saving {:.2}x\n\
         binarization overhead: +{:.2}% ops, +{:.2}% params\n",
        cost.total.total_ops(),
        cost.float_reference.total_ops(),
        cost.speedup(),
        cost.memory_saving(),
        cost.extra_ops_pct(),
        cost.extra_params_pct()
    ));
    lines.push(json!({
        "kind": "total",
        "total_ops": cost.total.total_ops(),
        "float_ops_reference": cost.float_reference.total_ops(),
        "speedup": cost.speedup(),
        "memory_saving": cost.memory_saving(),
        "extra_ops_pct": cost.extra_ops_pct(),
        "extra_params_pct": cost.extra_params_pct(),
    }));

    // Canonical self-test: the standard mid-network conv geometry whose
    // overhead and savings figures are known in closed form.
    let (n, c, k, hw) = (256, 256, 3, 14);
    let sign = conv_cost(n, c, k, hw, hw, CostMode::SignBinary)?;
    let ada = conv_cost(n, c, k, hw, hw, CostMode::Adabin)?;
    let float = conv_cost(n, c, k, hw, hw, CostMode::Float)?;
    let extra_ops = 100.0 * (ada.total_ops() - sign.total_ops()) / sign.total_ops();
    let extra_params = 100.0 * (ada.total_bits() as f64 - sign.total_bits() as f64)
        / sign.total_bits() as f64;
    let speedup = float.total_ops() / ada.total_ops();
    let memory = float.total_bits() as f64 / ada.total_bits() as f64;
    let ok = (extra_ops - 2.74).abs() < 0.2
        && (extra_params - 1.38).abs() < 0.1
        && (speedup - 61.44).abs() < 1.5
        && (memory - 31.13).abs() < 1.0;
    text.push_str(&format!(
        "self-test conv {n}x{c}x{k}x{k}@{hw}x{hw}: +{extra_ops:.2}% ops, +{extra_params:.2}% params, \
         {speedup:.2}x speedup, {memory:.2}x memory -> {}\n",
        if ok { "ok" } else { "MISMATCH" }
    ));
    lines.push(json!({
        "kind": "self_test",
        "n": n, "c": c, "k": k, "h": hw, "w": hw,
        "extra_ops_pct": extra_ops,
        "extra_params_pct": extra_params,
        "speedup": speedup,
        "memory_saving": memory,
        "ok": ok,
    }));
    Ok((text, lines))
}

/// Convert a checkpoint into a packed inference bundle on disk.
pub fn export(ckpt: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<u64> {
    let ck = Checkpoint::load(ckpt)?;
    let (_, model) = model_from_checkpoint(&ck)?;
    let bundle = export_packed_model(&model)?;
    let bytes = bundle.to_bytes();
    fs::write(out, &bytes)?;
    Ok(bytes.len() as u64)
}

fn summary(values: &[f32]) -> serde_json::Value {
    let n = values.len().max(1) as f32;
    let min = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mean = values.iter().sum::<f32>() / n;
    json!({"min": min, "max": max, "mean": mean, "count": values.len()})
}

/// Quantizer report for a (restored) model: activation (alpha, beta) per
/// binary conv, per-filter weight (alpha, beta) summaries, Maxout slope
/// ranges, and a flag for layers whose binary set is entirely positive.
pub fn inspect_model(model: &Model) -> Result<serde_json::Value> {
    let bundle = export_packed_model(model)?;
    let mut layers = Vec::new();
    for (i, rec) in bundle.records.iter().enumerate() {
        match rec {
            Record::BinaryConv { out_c, in_c, k, alpha_w, beta_w, alpha_a, beta_a, .. } => {
                layers.push(json!({
                    "record": i,
                    "kind": "binary_conv",
                    "shape": [out_c, in_c, k, k],
                    "alpha_a": alpha_a,
                    "beta_a": beta_a,
                    "alpha_w": summary(alpha_w),
                    "beta_w": summary(beta_w),
                    // both binary values positive: the layer lost its sign bit
                    "all_positive": beta_a - alpha_a > 0.0,
                }));
            }
            Record::Maxout { gpos, gneg } => {
                layers.push(json!({
                    "record": i,
                    "kind": "maxout",
                    "gamma_pos": summary(gpos),
                    "gamma_neg": summary(gneg),
                }));
            }
            _ => {}
        }
    }
    Ok(json!({"layers": layers}))
}

/// Load a checkpoint and report its quantizer state.
pub fn inspect(ckpt: impl AsRef<Path>) -> Result<serde_json::Value> {
    let ck = Checkpoint::load(ckpt)?;
    let (cfg, model) = model_from_checkpoint(&ck)?;
    let mut report = inspect_model(&model)?;
    report["epoch"] = json!(ck.epoch);
    report["arch"] = json!(cfg.arch);
    Ok(report)
}
