use std::fs;

use kshare::checkpoint::{Checkpoint, CheckpointDoc};
use kshare::config::RunConfig;
use kshare::metrics::RunMetrics;
use kshare::Error;
use kshare_core::optim::Optimizer;
use kshare_core::{Mode, Model, ModelConfig, Rng, SharingPreset, Tensor};

fn tiny(preset: SharingPreset, depth: usize) -> ModelConfig {
    ModelConfig::convmixer(8, depth).with_input([3, 8, 8]).with_preset(preset)
}

fn doc(model: &ModelConfig) -> CheckpointDoc {
    CheckpointDoc {
        run: RunConfig::synthetic(model.clone(), 3, 64, 32),
        epoch: 0,
        history: RunMetrics::new(0, 0),
        init_seed: 4,
    }
}

/// A model and optimizer after one AdamW step, so slots are populated.
fn stepped(cfg: &ModelConfig) -> (Model<f32>, Optimizer<f32>) {
    let mut model = Model::<f32>::new(cfg, 4).unwrap();
    let mut opt = Optimizer::new(kshare_core::optim::OptimConfig::adamw(0.01)).unwrap();
    let x = Tensor::normal(&[4, 3, 8, 8], 1.0, &mut Rng::new(1));
    model.accumulate_gradients(&x, &[0, 1, 2, 3], Mode::Train).unwrap();
    opt.step(&mut model.store, 0.01).unwrap();
    (model, opt)
}

#[test]
fn save_load_save_is_byte_identical() {
    let cfg = tiny(SharingPreset::FourKernel, 4);
    let (model, opt) = stepped(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    Checkpoint::capture(doc(&cfg), &model, &opt).save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let mut fresh = Model::<f32>::new(&cfg, 99).unwrap();
    loaded.restore_into(&mut fresh).unwrap();
    assert_eq!(fresh.store.params().len(), model.store.params().len());
    for (p, q) in fresh.store.params().iter().zip(model.store.params()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
    let mut opt2 = Optimizer::<f32>::new(opt.config).unwrap();
    loaded.restore_optimizer(&mut opt2);
    assert!(opt.slots().eq(opt2.slots()));
}

#[test]
fn shared_kernels_are_written_once() {
    let depth = 5;
    let cfg = tiny(SharingPreset::TwoKernel, depth);
    let model = Model::<f32>::new(&cfg, 0).unwrap();
    let ckpt = Checkpoint::capture(doc(&cfg), &model, &Optimizer::new(kshare_core::optim::OptimConfig::adamw(0.0)).unwrap());
    let block_weights: Vec<&str> = ckpt
        .params
        .iter()
        .map(|e| e.name.as_str())
        .filter(|n| n.starts_with("blocks.") && n.ends_with(".weight"))
        .collect();
    assert_eq!(block_weights, ["blocks.dw.shared0.weight", "blocks.pw.shared0.weight"]);
    // one BN (4 entries) per block conv, plus the embedding's
    let bn = ckpt.params.iter().filter(|e| e.name.ends_with(".running_var")).count();
    assert_eq!(bn, 2 * depth + 1);

    let baseline = tiny(SharingPreset::None, depth);
    let model = Model::<f32>::new(&baseline, 0).unwrap();
    let ckpt = Checkpoint::capture(doc(&baseline), &model, &Optimizer::new(kshare_core::optim::OptimConfig::adamw(0.0)).unwrap());
    let n = ckpt
        .params
        .iter()
        .filter(|e| e.name.starts_with("blocks.") && e.name.ends_with("w.weight"))
        .count();
    assert_eq!(n, 2 * depth);
}

#[test]
fn mismatched_architecture_lists_fields() {
    let cfg = tiny(SharingPreset::TwoKernel, 4);
    let (model, opt) = stepped(&cfg);
    let ckpt = Checkpoint::capture(doc(&cfg), &model, &opt);
    let mut other = Model::<f32>::new(&ModelConfig::convmixer(16, 4).with_input([3, 8, 8]), 0).unwrap();
    match ckpt.restore_into(&mut other) {
        Err(Error::Mismatch(fields)) => {
            assert!(fields.iter().any(|f| f.starts_with("channels")), "{fields:?}");
            assert!(fields.iter().any(|f| f.starts_with("sharing_preset")), "{fields:?}");
        }
        r => panic!("expected a mismatch, got {r:?}"),
    }
}

#[test]
fn corrupt_files_name_the_offset() {
    let cfg = tiny(SharingPreset::None, 2);
    let (model, opt) = stepped(&cfg);
    let bytes = Checkpoint::capture(doc(&cfg), &model, &opt).to_bytes().unwrap();
    let path = std::path::Path::new("x.ckpt");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    let err = Checkpoint::from_bytes(&bad, path).unwrap_err().to_string();
    assert!(err.contains("magic") && err.contains("offset 0"), "{err}");

    let mut bad = bytes.clone();
    bad[8] = 9;
    let err = Checkpoint::from_bytes(&bad, path).unwrap_err().to_string();
    assert!(err.contains("version 9") && err.contains("offset 8"), "{err}");

    let cut = bytes.len() - 10;
    match Checkpoint::from_bytes(&bytes[..cut], path) {
        Err(Error::Checkpoint { offset, reason, .. }) => {
            assert!(reason.contains("truncated"), "{reason}");
            assert!(offset as usize <= cut);
        }
        r => panic!("expected a truncation error, got {r:?}"),
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long, path).is_err());
}

#[test]
fn f64_checkpoints_keep_precision() {
    let cfg = tiny(SharingPreset::TwoKernel, 2);
    let model = Model::<f64>::new(&cfg, 3).unwrap();
    let opt = Optimizer::<f64>::new(kshare_core::optim::OptimConfig::sgd(0.9, 0.0)).unwrap();
    let bytes = Checkpoint::capture(doc(&cfg), &model, &opt).to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("m")).unwrap();
    let restored: Model<f64> = back.model().unwrap();
    assert_eq!(restored.store, model.store);
}
