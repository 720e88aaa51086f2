//! Squeeze-and-excitation: channel gates from a bottleneck MLP over the
//! globally pooled features.

use alloc::format;
use alloc::vec;

use super::activation::{sigmoid, Activation};
use super::dense::{global_avg_pool_forward, linear_backward, linear_forward, LinearHyper};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeHyper {
    pub channels: usize,
    pub ratio: usize,
}

impl SeHyper {
    pub const DEFAULT_RATIO: usize = 16;

    pub fn hidden(&self) -> usize {
        self.channels / self.ratio.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio == 0 || self.channels % self.ratio != 0 || self.hidden() == 0 {
            return Err(Error::Geometry(format!(
                "SE channels {} not divisible by reduction ratio {}",
                self.channels, self.ratio
            )));
        }
        Ok(())
    }

    fn squeeze(&self) -> LinearHyper {
        LinearHyper {
            in_features: self.channels,
            out_features: self.hidden(),
        }
    }

    fn excite(&self) -> LinearHyper {
        LinearHyper {
            in_features: self.hidden(),
            out_features: self.channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeCache<T> {
    pub squeeze: Tensor<T>,
    pub z1: Tensor<T>,
    pub a1: Tensor<T>,
    pub gate: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeGrads<T> {
    pub grad_x: Tensor<T>,
    pub grad_w1: Tensor<T>,
    pub grad_b1: Tensor<T>,
    pub grad_w2: Tensor<T>,
    pub grad_b2: Tensor<T>,
}

fn scale_channels<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>, hw: usize) -> Result<Tensor<T>> {
    let mut out = x.data().to_vec();
    for (plane, &g) in out.chunks_exact_mut(hw).zip(gate.data()) {
        plane.iter_mut().for_each(|v| *v = *v * g);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn se_block_forward<T: Scalar>(
    x: &Tensor<T>,
    w1: &Tensor<T>,
    b1: &Tensor<T>,
    w2: &Tensor<T>,
    b2: &Tensor<T>,
    h: &SeHyper,
) -> Result<(Tensor<T>, SeCache<T>)> {
    h.validate()?;
    let (n, c, hh, ww) = x.dims4()?;
    if c != h.channels {
        return Err(Error::shape("se_block input", x.shape(), &[n, h.channels, hh, ww]));
    }
    let squeeze = global_avg_pool_forward(x)?;
    let z1 = linear_forward(&squeeze, w1, b1, &h.squeeze())?;
    let a1 = z1.map(|v| Activation::Relu.apply(v));
    let z2 = linear_forward(&a1, w2, b2, &h.excite())?;
    let gate = z2.map(sigmoid);
    let out = scale_channels(x, &gate, hh * ww)?;
    Ok((out, SeCache { squeeze, z1, a1, gate }))
}

pub fn se_block_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    cache: &SeCache<T>,
    w1: &Tensor<T>,
    w2: &Tensor<T>,
    h: &SeHyper,
) -> Result<SeGrads<T>> {
    if grad_out.shape() != x.shape() {
        return Err(Error::shape("se_block_backward", grad_out.shape(), x.shape()));
    }
    let (n, c, hh, ww) = x.dims4()?;
    let hw = hh * ww;
    let mut dgate = vec![T::zero(); n * c];
    for ((d, gp), xp) in dgate
        .iter_mut()
        .zip(grad_out.data().chunks_exact(hw))
        .zip(x.data().chunks_exact(hw))
    {
        *d = gp.iter().zip(xp).fold(T::zero(), |s, (&g, &v)| s + g * v);
    }
    let dz2 = Tensor::new(
        vec![n, c],
        dgate
            .iter()
            .zip(cache.gate.data())
            .map(|(&d, &e)| d * e * (T::one() - e))
            .collect(),
    )?;
    let l2 = linear_backward(&dz2, &cache.a1, w2, &h.excite())?;
    let dz1 = activation_mask(&l2.grad_x, &cache.z1)?;
    let l1 = linear_backward(&dz1, &cache.squeeze, w1, &h.squeeze())?;

    let inv = T::of(1.0 / hw as f64);
    let mut gx = vec![T::zero(); x.len()];
    for (i, plane) in gx.chunks_exact_mut(hw).enumerate() {
        let e = cache.gate.data()[i];
        let ds = l1.grad_x.data()[i] * inv;
        let go = &grad_out.data()[i * hw..(i + 1) * hw];
        for (o, &g) in plane.iter_mut().zip(go) {
            *o = g * e + ds;
        }
    }
    Ok(SeGrads {
        grad_x: Tensor::new(x.shape().to_vec(), gx)?,
        grad_w1: l1.grad_w,
        grad_b1: l1.grad_b,
        grad_w2: l2.grad_w,
        grad_b2: l2.grad_b,
    })
}

fn activation_mask<T: Scalar>(grad: &Tensor<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    super::activation::activation_backward(Activation::Relu, z, grad)
}
