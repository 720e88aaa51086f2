//! Fully connected layer, global average pooling and residual addition.

use alloc::vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LinearHyper {
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads<T> {
    pub grad_x: Tensor<T>,
    pub grad_w: Tensor<T>,
    pub grad_b: Tensor<T>,
}

fn check_linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, h: &LinearHyper) -> Result<usize> {
    let (n, f) = x.dims2()?;
    if f != h.in_features {
        return Err(Error::shape("linear input", x.shape(), &[n, h.in_features]));
    }
    if w.shape() != [h.out_features, h.in_features] {
        return Err(Error::shape("linear weight", w.shape(), &[h.out_features, h.in_features]));
    }
    Ok(n)
}

/// `y = x·Wᵀ + b` with `W` stored as (out, in).
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, h: &LinearHyper) -> Result<Tensor<T>> {
    let n = check_linear(x, w, h)?;
    if b.shape() != [h.out_features] {
        return Err(Error::shape("linear bias", b.shape(), &[h.out_features]));
    }
    let mut out = vec![T::zero(); n * h.out_features];
    gemm_nt(n, h.in_features, h.out_features, x.data(), w.data(), &mut out);
    for row in out.chunks_exact_mut(h.out_features) {
        for (o, &bv) in row.iter_mut().zip(b.data()) {
            *o = *o + bv;
        }
    }
    Tensor::new(vec![n, h.out_features], out)
}

pub fn linear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    h: &LinearHyper,
) -> Result<LinearGrads<T>> {
    let n = check_linear(x, w, h)?;
    if grad_out.shape() != [n, h.out_features] {
        return Err(Error::shape("linear_backward", grad_out.shape(), &[n, h.out_features]));
    }
    let mut gx = vec![T::zero(); x.len()];
    gemm_nn(n, h.out_features, h.in_features, grad_out.data(), w.data(), &mut gx);
    let mut gw = vec![T::zero(); w.len()];
    gemm_tn(h.out_features, n, h.in_features, grad_out.data(), x.data(), &mut gw);
    let mut gb = vec![T::zero(); h.out_features];
    for row in grad_out.data().chunks_exact(h.out_features) {
        for (acc, &g) in gb.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    Ok(LinearGrads {
        grad_x: Tensor::new(x.shape().to_vec(), gx)?,
        grad_w: Tensor::new(w.shape().to_vec(), gw)?,
        grad_b: Tensor::new(vec![h.out_features], gb)?,
    })
}

/// (N, C, H, W) → (N, C) spatial mean.
pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = T::of(1.0 / hw as f64);
    let out = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().fold(T::zero(), |s, &v| s + v) * inv)
        .collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let (n, c, h, w) = match *input_shape {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::shape("global_avg_pool_backward", input_shape, &[0, 0, 0, 0])),
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::shape("global_avg_pool_backward", grad_out.shape(), &[n, c]));
    }
    let hw = h * w;
    let inv = T::of(1.0 / hw as f64);
    let mut out = vec![T::zero(); n * c * hw];
    for (plane, &g) in out.chunks_exact_mut(hw).zip(grad_out.data()) {
        plane.fill(g * inv);
    }
    Tensor::new(input_shape.to_vec(), out)
}

pub fn residual_add_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.add(b)
}

/// The incoming gradient flows unchanged into both branches.
pub fn residual_add_backward<T: Scalar>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn linear_matches_matmul() {
        let mut rng = Rng::new(1);
        let h = LinearHyper {
            in_features: 5,
            out_features: 3,
        };
        let x = Tensor::<f64>::normal(&[4, 5], 1.0, &mut rng);
        let w = Tensor::normal(&[3, 5], 1.0, &mut rng);
        let b = Tensor::normal(&[3], 1.0, &mut rng);
        let y = linear_forward(&x, &w, &b, &h).unwrap();
        let wt = Tensor::from_fn(&[5, 3], |i| w.data()[(i % 3) * 5 + i / 3]);
        let r = x.matmul(&wt).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let d = y.data()[i * 3 + j] - r.data()[i * 3 + j] - b.data()[j];
                assert!(d.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_of_constant_plane_is_constant() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |i| (i / 16) as f64);
        let y = global_avg_pool_forward(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let g = global_avg_pool_backward(&Tensor::<f64>::ones(&[2, 3]), &[2, 3, 4, 4]).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0 / 16.0));
    }

    #[test]
    fn residual_duplicates_gradient() {
        let g = Tensor::<f64>::from_fn(&[2, 2], |i| i as f64);
        let (a, b) = residual_add_backward(&g);
        assert_eq!(a, g);
        assert_eq!(b, g);
    }
}
