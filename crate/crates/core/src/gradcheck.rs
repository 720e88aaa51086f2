//! Central finite-difference verification of a model's analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::Mode;
use crate::layers::softmax_xent;
use crate::models::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    /// Bound layer sites; more than one for a shared kernel.
    pub sites: usize,
    /// See [`relative_error`].
    pub rel_err: f64,
    pub max_abs_err: f64,
    /// Elements left out because the ±step evaluations landed on different
    /// sides of a ReLU kink, where central differences are meaningless.
    pub kinked: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradcheckReport {
    pub step: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.rel_err <= tol)
    }
}

/// Gradient norms below this are indistinguishable from finite-difference
/// round-off (conv biases ahead of a training-mode batchnorm, for example,
/// have an exactly zero gradient).
pub const NORM_FLOOR: f64 = 1e-4;

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .max(numeric.iter().map(|n| n * n).sum())
        .max(NORM_FLOOR * NORM_FLOOR);
    libm::sqrt(diff / scale)
}

/// Gradients of the mean training-mode loss on `(x, labels)` for every
/// trainable parameter, analytic and by central differences with `step`.
/// Elements whose two probes see different ReLU activation patterns are
/// excluded and counted in [`ParamCheck::kinked`].
pub fn gradcheck(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], step: f64) -> Result<GradcheckReport> {
    let mut analytic = model.clone();
    analytic.store.zero_grads();
    analytic.accumulate_gradients(x, labels, Mode::Train)?;

    let mut probe = model.clone();
    let mut params = Vec::new();
    for id in model.store.ids() {
        let p = model.store.param(id);
        if !p.trainable {
            continue;
        }
        let grad = analytic.store.grad(id).data();
        let mut a = Vec::with_capacity(p.value.len());
        let mut numeric = Vec::with_capacity(p.value.len());
        let mut kinked = 0;
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            probe.store.param_mut(id).value.data_mut()[i] = orig + step;
            let (plus, kinks_plus) = probe_loss(&probe, x, labels)?;
            probe.store.param_mut(id).value.data_mut()[i] = orig - step;
            let (minus, kinks_minus) = probe_loss(&probe, x, labels)?;
            probe.store.param_mut(id).value.data_mut()[i] = orig;
            if kinks_plus != kinks_minus {
                kinked += 1;
                continue;
            }
            a.push(grad[i]);
            numeric.push((plus - minus) / (2.0 * step));
        }
        let max_abs_err = a.iter().zip(&numeric).map(|(a, n)| libm::fabs(a - n)).fold(0.0, f64::max);
        params.push(ParamCheck {
            name: p.name.clone(),
            elements: p.value.len(),
            sites: p.sites.len(),
            rel_err: relative_error(&a, &numeric),
            max_abs_err,
            kinked,
        });
    }
    Ok(GradcheckReport { step, params })
}

fn probe_loss(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize]) -> Result<(f64, Vec<bool>)> {
    let pass = model.forward(x, Mode::Train)?;
    let loss = softmax_xent(pass.logits(), labels)?.0;
    Ok((loss, pass.tape.relu_pattern(&model.graph)))
}
