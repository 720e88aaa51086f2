//! Finite-difference checks of down-scaled models.

use kshare_core::gradcheck::{gradcheck, GradcheckReport};
use kshare_core::{Model, ModelConfig, Rng, SharingPreset, Tensor};

use crate::error::{Error, Result};

/// ConvMixer-8/3 with two shared kernels on 8×8 inputs.
pub fn tiny_convmixer() -> ModelConfig {
    ModelConfig::convmixer(8, 3)
        .with_input([3, 8, 8])
        .with_preset(SharingPreset::TwoKernel)
}

/// SE-ResNet with stage widths (8, 16, 32), two blocks per stage, the third
/// stage shared, SE reduction 4, on 8×8 inputs.
pub fn tiny_seresnet() -> ModelConfig {
    ModelConfig::se_resnet(2)
        .with_channels(&[8, 16, 32])
        .with_se_ratio(4)
        .with_input([3, 8, 8])
        .with_stages(&[3])
}

/// Checks every trainable parameter of `cfg` (64-bit, `batch` random samples).
pub fn check_model(cfg: &ModelConfig, seed: u64, batch: usize, step: f64) -> Result<GradcheckReport> {
    let model = Model::<f64>::new(cfg, seed)?;
    let mut rng = Rng::stream(seed, 1);
    let [c, h, w] = cfg.input;
    let x = Tensor::normal(&[batch, c, h, w], 1.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(cfg.num_classes)).collect();
    Ok(gradcheck(&model, &x, &labels, step)?)
}

/// Fails with the worst parameter if its relative error exceeds `tol`.
pub fn require(report: &GradcheckReport, tol: f64) -> Result<()> {
    if let Some(worst) = report.worst().filter(|w| !(w.rel_err <= tol)) {
        return Err(Error::Gradcheck {
            name: worst.name.clone(),
            rel_err: worst.rel_err,
            tol,
        });
    }
    Ok(())
}
