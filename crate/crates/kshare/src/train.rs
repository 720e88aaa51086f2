//! The training loop, evaluation, and run directories.
//!
//! A run directory holds `run.json` (the resolved config plus costs),
//! `metrics.csv` / `metrics.json`, `last.ckpt` (rewritten after every epoch,
//! first written at initialization) and `best.ckpt`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kshare_core::accounting::{count_flops, count_params};
use kshare_core::optim::Optimizer;
use kshare_core::{DType, Error as CoreError, Mode, Model, Scalar};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointDoc};
use crate::config::RunConfig;
use crate::data::{batches, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{write_atomic, EpochMetrics, RunMetrics};

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `last.ckpt` in the output directory if there is one.
    pub resume: bool,
    /// Stop (as if interrupted) once this many epochs are complete.
    pub stop_after: Option<usize>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Serialize)]
struct RunInfo<'a> {
    run: &'a RunConfig,
    out_dir: &'a Path,
    params: u64,
    flops: u64,
    train_samples: usize,
    test_samples: usize,
}

/// Loads the configured data and trains.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<RunMetrics> {
    cfg.validate()?;
    let (train_ds, test_ds) = cfg.data.load(cfg.seed, cfg.model.input, cfg.model.num_classes)?;
    train_on(cfg, &train_ds, &test_ds, opts)
}

pub fn train_on(cfg: &RunConfig, train_ds: &Dataset, test_ds: &Dataset, opts: &TrainOptions) -> Result<RunMetrics> {
    match cfg.precision {
        DType::F32 => train_typed::<f32>(cfg, train_ds, test_ds, opts),
        DType::F64 => train_typed::<f64>(cfg, train_ds, test_ds, opts),
    }
}

pub fn train_typed<T: Scalar>(
    cfg: &RunConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    opts: &TrainOptions,
) -> Result<RunMetrics> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let last_path = dir.join("last.ckpt");
    let best_path = dir.join("best.ckpt");

    let mut model = Model::<T>::new(&cfg.model, cfg.seed)?;
    let mut opt = Optimizer::<T>::new(cfg.optimizer)?;
    let params = count_params(&model.graph, &model.plan);
    let flops = count_flops(&model.graph)?;
    let mut metrics = RunMetrics::new(params, flops);
    let mut start = 0;

    if opts.resume && last_path.exists() {
        let ckpt = Checkpoint::load(&last_path)?;
        let diff = run_diff(&ckpt.doc.run, cfg);
        if !diff.is_empty() {
            return Err(Error::Mismatch(diff));
        }
        ckpt.restore_into(&mut model)?;
        ckpt.restore_optimizer(&mut opt);
        start = ckpt.doc.epoch;
        metrics = ckpt.doc.history;
    } else {
        let info = RunInfo {
            run: cfg,
            out_dir: dir,
            params,
            flops,
            train_samples: train_ds.len(),
            test_samples: test_ds.len(),
        };
        write_atomic(&dir.join("run.json"), &serde_json::to_vec_pretty(&info)?)?;
        save(cfg, 0, &metrics, &model, &opt, &last_path)?;
        metrics.write(dir)?;
    }

    let end = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in start..end {
        let t0 = Instant::now();
        let lr = cfg.schedule.lr_at(epoch)?;
        let (train_loss, train_acc) = train_epoch(&mut model, &mut opt, cfg, train_ds, epoch, lr, &last_path)?;
        let (test_loss, test_acc) = evaluate(&model, test_ds, cfg.batch_size, &cfg.augment)?;
        let row = EpochMetrics {
            epoch: epoch + 1,
            train_loss,
            train_acc,
            test_loss,
            test_acc,
            lr,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>4}  lr {:.5}  train {:.4} / {:.2}%  test {:.4} / {:.2}%  {:.1}s",
                row.epoch,
                lr,
                train_loss,
                100.0 * train_acc,
                test_loss,
                100.0 * test_acc,
                row.seconds
            );
        }
        let best = metrics.push(row);
        save(cfg, epoch + 1, &metrics, &model, &opt, &last_path)?;
        if best {
            fs::copy(&last_path, &best_path).map_err(|e| Error::io(&best_path, e))?;
        }
        metrics.write(dir)?;
    }
    Ok(metrics)
}

fn train_epoch<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    cfg: &RunConfig,
    ds: &Dataset,
    epoch: usize,
    lr: f64,
    last_good: &Path,
) -> Result<(f64, f64)> {
    let diverged = |what: String, batch: usize| Error::Diverged {
        what,
        epoch: epoch + 1,
        batch,
        checkpoint: last_good.to_path_buf(),
    };
    let (mut loss_sum, mut correct) = (0.0, 0);
    for (b, batch) in batches::<T>(ds, cfg.batch_size, cfg.seed, epoch, &cfg.augment, true).enumerate() {
        model.store.zero_grads();
        let stats = model.accumulate_gradients(&batch.x, &batch.labels, Mode::Train)?;
        let loss = stats.loss.to_f64();
        if !loss.is_finite() {
            return Err(diverged("loss".into(), b));
        }
        match opt.step(&mut model.store, lr) {
            Err(CoreError::NonFiniteGradient { name, index }) => {
                return Err(diverged(format!("gradient of {name} (element {index})"), b))
            }
            r => r?,
        }
        loss_sum += loss * batch.labels.len() as f64;
        correct += stats.correct;
    }
    let n = ds.len().max(1) as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

fn save<T: Scalar>(
    cfg: &RunConfig,
    epoch: usize,
    metrics: &RunMetrics,
    model: &Model<T>,
    opt: &Optimizer<T>,
    path: &Path,
) -> Result<()> {
    let doc = CheckpointDoc {
        run: cfg.clone(),
        epoch,
        history: metrics.clone(),
        init_seed: cfg.seed,
    };
    Checkpoint::capture(doc, model, opt).save(path)
}

/// Differences between two run configs that make resuming unsafe.
fn run_diff(saved: &RunConfig, cfg: &RunConfig) -> Vec<String> {
    let mut diff = saved.model.diff(&cfg.model);
    let mut a = saved.clone();
    let mut b = cfg.clone();
    a.model = b.model.clone();
    a.out_dir = PathBuf::new();
    b.out_dir = PathBuf::new();
    if a != b {
        diff.push("run settings differ from the checkpoint (optimizer, schedule, data or seed)".into());
    }
    diff
}

/// Mean loss and accuracy in eval mode (running batchnorm statistics, no
/// augmentation; normalization follows `policy`).
pub fn evaluate<T: Scalar>(model: &Model<T>, ds: &Dataset, batch_size: usize, policy: &AugmentPolicy) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut loss_sum, mut correct) = (0.0, 0);
    for batch in batches::<T>(ds, batch_size, 0, 0, policy, false) {
        let pass = model.forward(&batch.x, Mode::Eval)?;
        let (loss, _) = kshare_core::layers::softmax_xent(pass.logits(), &batch.labels)?;
        loss_sum += loss.to_f64() * batch.labels.len() as f64;
        correct += kshare_core::layers::accuracy_count(pass.logits(), &batch.labels)?;
    }
    let n = ds.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Evaluates a checkpoint at its stored precision. If `expected` is given,
/// its model must match the checkpoint's.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, expected: Option<&RunConfig>, ds: &Dataset) -> Result<(f64, f64)> {
    if let Some(cfg) = expected {
        let diff = ckpt.doc.run.model.diff(&cfg.model);
        if !diff.is_empty() {
            return Err(Error::Mismatch(diff));
        }
    }
    let run = &ckpt.doc.run;
    match ckpt.dtype {
        DType::F32 => evaluate(&ckpt.model::<f32>()?, ds, run.batch_size, &run.augment),
        DType::F64 => evaluate(&ckpt.model::<f64>()?, ds, run.batch_size, &run.augment),
    }
}
