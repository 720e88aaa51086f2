//! SGD with momentum, AdamW, and per-epoch learning-rate schedules.
//!
//! State is keyed by [`ParamId`], so a kernel shared by many sites owns a
//! single momentum buffer (or moment pair) and is stepped once.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sharing::{ParamId, ParameterStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    #[cfg_attr(feature = "serde", serde(rename = "adamw"))]
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimConfig {
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub kind: OptimizerKind,
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd { momentum },
            weight_decay,
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            weight_decay,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            OptimizerKind::Sgd { .. } => "sgd",
            OptimizerKind::AdamW { .. } => "adamw",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            OptimizerKind::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerKind::AdamW { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if !ok || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Per-parameter optimizer state: the momentum buffer (SGD) or the first
/// and second moments (AdamW), plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot<T> {
    pub steps: u64,
    pub buffers: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub config: OptimConfig,
    slots: Vec<Option<Slot<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, slots: Vec::new() })
    }

    pub fn slot(&self, id: ParamId) -> Option<&Slot<T>> {
        self.slots.get(id.index()).and_then(Option::as_ref)
    }

    /// All populated slots in ParamId order.
    pub fn slots(&self) -> impl Iterator<Item = (ParamId, &Slot<T>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (ParamId(i as u32), s)))
    }

    pub fn set_slot(&mut self, id: ParamId, slot: Slot<T>) {
        if self.slots.len() <= id.index() {
            self.slots.resize(id.index() + 1, None);
        }
        self.slots[id.index()] = Some(slot);
    }

    fn buffer_count(&self) -> usize {
        match self.config.kind {
            OptimizerKind::Sgd { .. } => 1,
            OptimizerKind::AdamW { .. } => 2,
        }
    }

    /// Applies one update with learning rate `lr` to every trainable
    /// parameter. Nothing is modified if any gradient is non-finite or a
    /// shared kernel is missing site contributions.
    pub fn step(&mut self, store: &mut ParameterStore<T>, lr: f64) -> Result<()> {
        store.step_ready()?;
        for p in store.params() {
            if p.trainable {
                if let Some(index) = p.grad.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        name: p.name.clone(),
                        index,
                    });
                }
            }
        }
        if self.slots.len() < store.len() {
            self.slots.resize(store.len(), None);
        }
        let nbuf = self.buffer_count();
        let wd = self.config.weight_decay;
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.param_mut(id);
            if !p.trainable {
                continue;
            }
            let decay = if p.role.decays() { wd } else { 0.0 };
            let slot = self.slots[id.index()].get_or_insert_with(|| Slot {
                steps: 0,
                buffers: (0..nbuf).map(|_| Tensor::zeros_like(&p.value)).collect(),
            });
            if slot.buffers.len() != nbuf || slot.buffers.iter().any(|b| b.shape() != p.value.shape()) {
                return Err(Error::shape("optimizer slot", slot.buffers[0].shape(), p.value.shape()));
            }
            slot.steps += 1;
            match self.config.kind {
                OptimizerKind::Sgd { momentum } => sgd_update(p.value.data_mut(), p.grad.data(), slot, lr, momentum, decay),
                OptimizerKind::AdamW { beta1, beta2, eps } => {
                    adamw_update(p.value.data_mut(), p.grad.data(), slot, lr, beta1, beta2, eps, decay)
                }
            }
        }
        Ok(())
    }
}

// v ← μv + g + wd·w;  w ← w − lr·v
fn sgd_update<T: Scalar>(w: &mut [T], g: &[T], slot: &mut Slot<T>, lr: f64, momentum: f64, wd: f64) {
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(wd));
    let v = slot.buffers[0].data_mut();
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v + g + wd * *w;
        *w = *w - lr * *v;
    }
}

#[allow(clippy::too_many_arguments)]
fn adamw_update<T: Scalar>(w: &mut [T], g: &[T], slot: &mut Slot<T>, lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) {
    let t = slot.steps as i32;
    let c1 = T::of(1.0 - libm::pow(b1, t as f64));
    let c2 = T::of(1.0 - libm::pow(b2, t as f64));
    let (lr, b1, b2, eps) = (T::of(lr), T::of(b1), T::of(b2), T::of(eps));
    let shrink = T::one() - lr * T::of(wd);
    let (m, v) = slot.buffers.split_at_mut(1);
    let (m, v) = (m[0].data_mut(), v[0].data_mut());
    for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *w = *w * shrink - lr * mh / (vh.sqrt() + eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ScheduleKind {
    Cosine,
    Multistep,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub total_epochs: usize,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub min_lr: f64,
}

impl Schedule {
    pub fn cosine(base_lr: f64, total_epochs: usize) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            base_lr,
            total_epochs,
            milestones: Vec::new(),
            gamma: 0.1,
            min_lr: 0.0,
        }
    }

    /// Decays by `gamma = 0.1` at 50% and 75% of training.
    pub fn multistep(base_lr: f64, total_epochs: usize) -> Self {
        Self {
            kind: ScheduleKind::Multistep,
            milestones: alloc::vec![total_epochs / 2, total_epochs * 3 / 4],
            ..Self::cosine(base_lr, total_epochs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Config("schedule needs at least one epoch".into()));
        }
        if !(self.base_lr > 0.0) || !(self.min_lr >= 0.0) || !(self.gamma > 0.0) {
            return Err(Error::Config(format!(
                "invalid schedule rates: base {} min {} gamma {}",
                self.base_lr, self.min_lr, self.gamma
            )));
        }
        if self.kind == ScheduleKind::Multistep {
            let increasing = self.milestones.windows(2).all(|w| w[0] < w[1]);
            if !increasing || self.milestones.iter().any(|&m| m >= self.total_epochs) {
                return Err(Error::Config(format!(
                    "milestones {:?} must be strictly increasing and below {}",
                    self.milestones, self.total_epochs
                )));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if epoch > self.total_epochs {
            return Err(Error::Config(format!("epoch {epoch} beyond schedule of {}", self.total_epochs)));
        }
        Ok(match self.kind {
            ScheduleKind::Cosine => {
                let t = epoch as f64 / self.total_epochs as f64;
                self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + libm::cos(core::f64::consts::PI * t))
            }
            ScheduleKind::Multistep => {
                let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
                self.base_lr * libm::pow(self.gamma, passed as f64)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharing::{ParamRole, SiteGrad};

    fn store_with(value: f64, grad: f64, role: ParamRole) -> (ParameterStore<f64>, ParamId) {
        let mut s = ParameterStore::new();
        let id = s.register("w", role, Tensor::full(&[1], value), &[1]).unwrap();
        s.accumulate_shared_gradients(alloc::vec![SiteGrad {
            site: 1,
            param: id,
            grad: Tensor::full(&[1], grad),
        }])
        .unwrap();
        (s, id)
    }

    #[test]
    fn plain_sgd() {
        let (mut s, id) = store_with(1.0, 0.5, ParamRole::ConvWeight);
        let mut opt = Optimizer::new(OptimConfig::sgd(0.0, 0.0)).unwrap();
        opt.step(&mut s, 0.1).unwrap();
        assert!((s.value(id).data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints() {
        let s = Schedule::cosine(0.01, 10);
        assert_eq!(s.lr_at(0).unwrap(), 0.01);
        assert!(s.lr_at(10).unwrap().abs() < 1e-18);
        assert!(s.lr_at(11).is_err());
    }

    #[test]
    fn multistep_milestones() {
        let mut s = Schedule::multistep(0.1, 256);
        assert_eq!(s.milestones, [128, 192]);
        assert!((s.lr_at(200).unwrap() - 0.001).abs() < 1e-15);
        assert!((s.lr_at(127).unwrap() - 0.1).abs() < 1e-15);
        s.milestones = alloc::vec![192, 128];
        assert!(s.lr_at(0).is_err());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, _) = store_with(1.0, f64::NAN, ParamRole::ConvWeight);
        let mut opt = Optimizer::new(OptimConfig::adamw(0.0)).unwrap();
        match opt.step(&mut s, 0.1) {
            Err(Error::NonFiniteGradient { name, index }) => assert_eq!((name.as_str(), index), ("w", 0)),
            other => panic!("{other:?}"),
        }
    }
}
