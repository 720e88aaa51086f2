//! Per-channel batch normalization over (N, H, W).
//!
//! The forward pass is pure: batch statistics are returned to the caller,
//! which decides whether to fold them into the running averages.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormHyper {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormHyper {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }
}

/// Running statistics of one batchnorm site. Never shared between sites.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }

    pub fn update(&mut self, stats: &BatchStats<T>, momentum: f64) {
        stats.apply(&mut self.running_mean, &mut self.running_var, momentum);
    }
}

/// Batch mean and unbiased variance produced by a training-mode forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BatchStats<T> {
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn apply(&self, running_mean: &mut Tensor<T>, running_var: &mut Tensor<T>, momentum: f64) {
        let m = T::of(momentum);
        let keep = T::one() - m;
        for (r, &b) in running_mean.data_mut().iter_mut().zip(&self.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in running_var.data_mut().iter_mut().zip(&self.var) {
            *r = keep * *r + m * b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub training: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads<T> {
    pub grad_x: Tensor<T>,
    pub grad_gamma: Tensor<T>,
    pub grad_beta: Tensor<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    hyper: &BatchNormHyper,
    training: bool,
) -> Result<(Tensor<T>, BnCache<T>, Option<BatchStats<T>>)> {
    let (n, c, h, w) = x.dims4()?;
    let chan = [hyper.channels];
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
        if t.shape() != chan {
            return Err(Error::Geometry(format!(
                "batchnorm {name} has shape {:?}, expected {:?}",
                t.shape(),
                chan
            )));
        }
    }
    if c != hyper.channels {
        return Err(Error::shape("batchnorm input", x.shape(), &[n, hyper.channels, h, w]));
    }
    let hw = h * w;
    let m = n * hw;
    let eps = T::of(hyper.eps);
    let xd = x.data();

    let (mean, var, stats) = if training {
        if m < 2 {
            return Err(Error::Geometry(format!(
                "batchnorm needs at least two values per channel in training mode, got {m}"
            )));
        }
        let inv_m = T::of(1.0 / m as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for s_idx in 0..n {
                for &v in &xd[(s_idx * c + ch) * hw..(s_idx * c + ch + 1) * hw] {
                    s = s + v;
                }
            }
            let mu = s * inv_m;
            let mut q = T::zero();
            for s_idx in 0..n {
                for &v in &xd[(s_idx * c + ch) * hw..(s_idx * c + ch + 1) * hw] {
                    let d = v - mu;
                    q = q + d * d;
                }
            }
            mean[ch] = mu;
            var[ch] = q * inv_m;
        }
        let unbiased = T::of(m as f64 / (m as f64 - 1.0));
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|&v| v * unbiased).collect(),
        };
        (mean, var, Some(stats))
    } else {
        (running_mean.data().to_vec(), running_var.data().to_vec(), None)
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in base..base + hw {
                let xh = (xd[i] - mu) * is;
                xhat[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        BnCache {
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
            training,
        },
        stats,
    ))
}

pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
) -> Result<BnGrads<T>> {
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::shape("batchnorm_backward", grad_out.shape(), cache.xhat.shape()));
    }
    let (n, c, h, w) = grad_out.dims4()?;
    let hw = h * w;
    let m = T::of((n * hw) as f64);
    let gy = grad_out.data();
    let xh = cache.xhat.data();
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                gb[ch] = gb[ch] + gy[i];
                gg[ch] = gg[ch] + gy[i] * xh[i];
            }
        }
    }
    let mut gx = vec![T::zero(); grad_out.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            if cache.training {
                let k = scale / m;
                for i in base..base + hw {
                    gx[i] = k * (m * gy[i] - gb[ch] - xh[i] * gg[ch]);
                }
            } else {
                for i in base..base + hw {
                    gx[i] = scale * gy[i];
                }
            }
        }
    }
    Ok(BnGrads {
        grad_x: Tensor::new(grad_out.shape().to_vec(), gx)?,
        grad_gamma: Tensor::new(vec![c], gg)?,
        grad_beta: Tensor::new(vec![c], gb)?,
    })
}
