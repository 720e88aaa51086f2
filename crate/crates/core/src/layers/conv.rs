//! Grouped 2-D cross-correlation via im2col + matmul.

use alloc::format;
use alloc::vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{col2im_add, gemm_nn, gemm_nt, gemm_tn, im2col_into, ConvGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Conv2dHyper {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl Conv2dHyper {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            groups: 1,
            bias: true,
        }
    }

    /// `channels → channels`, one group per channel, "same" padding for odd kernels.
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, kernel, 1, kernel / 2)
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1, 1, 0)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn is_pointwise(&self) -> bool {
        self.groups == 1 && self.kernel == (1, 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel.0,
            self.kernel.1,
        ]
    }

    /// Fan-in of one output unit.
    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups.max(1) * self.kernel.0 * self.kernel.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::Geometry(format!("degenerate convolution {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::Geometry(format!(
                "channels {}→{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    pub fn geometry(&self, height: usize, width: usize) -> ConvGeometry {
        ConvGeometry {
            channels: self.in_channels,
            height,
            width,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn output_hw(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.validate()?;
        self.geometry(height, width).output_hw()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub grad_x: Tensor<T>,
    pub grad_w: Tensor<T>,
    pub grad_b: Option<Tensor<T>>,
}

fn check_operands<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    h: &Conv2dHyper,
) -> Result<(usize, usize, usize, usize, usize)> {
    h.validate()?;
    let (n, c, hh, ww) = x.dims4()?;
    if c != h.in_channels {
        return Err(Error::Geometry(format!(
            "input has {c} channels, convolution expects {}",
            h.in_channels
        )));
    }
    if w.shape() != h.weight_shape() {
        return Err(Error::shape("conv2d weight", w.shape(), &h.weight_shape()));
    }
    let (ho, wo) = h.geometry(hh, ww).output_hw()?;
    Ok((n, hh, ww, ho, wo))
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    h: &Conv2dHyper,
) -> Result<Tensor<T>> {
    let (n, hh, ww, ho, wo) = check_operands(x, w, h)?;
    match (h.bias, b) {
        (true, Some(b)) if b.shape() != [h.out_channels] => {
            return Err(Error::shape("conv2d bias", b.shape(), &[h.out_channels]))
        }
        (true, None) => return Err(Error::Geometry("convolution bias missing".into())),
        _ => {}
    }
    let geom = h.geometry(hh, ww);
    let g = h.groups;
    let (cin_g, cout_g) = (h.in_channels / g, h.out_channels / g);
    let kg = cin_g * h.kernel.0 * h.kernel.1;
    let p = ho * wo;
    let sample_in = h.in_channels * hh * ww;
    let sample_out = h.out_channels * p;
    let pointwise = geom.is_pointwise();
    let mut cols = if pointwise { vec![] } else { vec![T::zero(); geom.patch_len() * p] };
    let mut out = vec![T::zero(); n * sample_out];
    let wd = w.data();

    for (xn, on) in x.data().chunks_exact(sample_in).zip(out.chunks_exact_mut(sample_out)) {
        let cn: &[T] = if pointwise {
            xn
        } else {
            im2col_into(xn, &geom, &mut cols);
            &cols
        };
        for gi in 0..g {
            gemm_nn(
                cout_g,
                kg,
                p,
                &wd[gi * cout_g * kg..],
                &cn[gi * kg * p..],
                &mut on[gi * cout_g * p..(gi + 1) * cout_g * p],
            );
        }
        if let (true, Some(b)) = (h.bias, b) {
            for (plane, &bv) in on.chunks_exact_mut(p).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Tensor::new(vec![n, h.out_channels, ho, wo], out)
}

/// Gradients of one convolution site. `grad_w`/`grad_b` are this site's
/// contribution only; summing over a sharing group happens in the store.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    h: &Conv2dHyper,
) -> Result<ConvGrads<T>> {
    let (n, hh, ww, ho, wo) = check_operands(x, w, h)?;
    let expected = [n, h.out_channels, ho, wo];
    if grad_out.shape() != expected {
        return Err(Error::shape("conv2d_backward grad_out", grad_out.shape(), &expected));
    }
    let geom = h.geometry(hh, ww);
    let g = h.groups;
    let (cin_g, cout_g) = (h.in_channels / g, h.out_channels / g);
    let kg = cin_g * h.kernel.0 * h.kernel.1;
    let p = ho * wo;
    let sample_in = h.in_channels * hh * ww;
    let sample_out = h.out_channels * p;
    let pointwise = geom.is_pointwise();
    let mut cols = if pointwise { vec![] } else { vec![T::zero(); geom.patch_len() * p] };
    let mut grad_cols = if pointwise { vec![] } else { vec![T::zero(); geom.patch_len() * p] };

    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); h.out_channels];
    let mut gx = vec![T::zero(); x.len()];
    let wd = w.data();

    for ((xn, gon), gxn) in x
        .data()
        .chunks_exact(sample_in)
        .zip(grad_out.data().chunks_exact(sample_out))
        .zip(gx.chunks_exact_mut(sample_in))
    {
        for (acc, plane) in gb.iter_mut().zip(gon.chunks_exact(p)) {
            *acc = *acc + plane.iter().fold(T::zero(), |s, &v| s + v);
        }
        let cn: &[T] = if pointwise {
            xn
        } else {
            im2col_into(xn, &geom, &mut cols);
            &cols
        };
        for gi in 0..g {
            gemm_nt(
                cout_g,
                p,
                kg,
                &gon[gi * cout_g * p..],
                &cn[gi * kg * p..],
                &mut gw[gi * cout_g * kg..(gi + 1) * cout_g * kg],
            );
        }
        let dst: &mut [T] = if pointwise {
            gxn
        } else {
            grad_cols.fill(T::zero());
            &mut grad_cols
        };
        for gi in 0..g {
            gemm_tn(
                kg,
                cout_g,
                p,
                &wd[gi * cout_g * kg..],
                &gon[gi * cout_g * p..],
                &mut dst[gi * kg * p..(gi + 1) * kg * p],
            );
        }
        if !pointwise {
            col2im_add(&grad_cols, &geom, gxn);
        }
    }

    Ok(ConvGrads {
        grad_x: Tensor::new(x.shape().to_vec(), gx)?,
        grad_w: Tensor::new(w.shape().to_vec(), gw)?,
        grad_b: if h.bias {
            Some(Tensor::new(vec![h.out_channels], gb)?)
        } else {
            None
        },
    })
}
