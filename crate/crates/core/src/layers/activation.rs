use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Elementwise nonlinearities.
///
/// `Gelu` is the tanh approximation
/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`; `GeluErf` is the exact
/// `x·Φ(x)` form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Gelu,
    GeluErf,
    Relu,
    Sigmoid,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Gelu => {
                let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
                T::of(0.5) * x * (T::one() + u.tanh())
            }
            Activation::GeluErf => {
                let xf = x.to_f64();
                T::of(0.5 * xf * (1.0 + libm::erf(xf * INV_SQRT_2)))
            }
        }
    }

    /// Derivative at `x`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Gelu => {
                let c = T::of(GELU_C);
                let a = T::of(GELU_A);
                let half = T::of(0.5);
                let t = (c * (x + a * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
            }
            Activation::GeluErf => {
                let xf = x.to_f64();
                let cdf = 0.5 * (1.0 + libm::erf(xf * INV_SQRT_2));
                let pdf = INV_SQRT_2PI * libm::exp(-0.5 * xf * xf);
                T::of(cdf + xf * pdf)
            }
        }
    }
}

pub fn activation_forward<T: Scalar>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// Backward through the saved forward input `x`.
pub fn activation_backward<T: Scalar>(
    kind: Activation,
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> crate::error::Result<Tensor<T>> {
    let d = x.map(|v| kind.derivative(v));
    d.mul(grad_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn relu_and_sigmoid_values() {
        let x = Tensor::new(alloc::vec![3], alloc::vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(activation_forward(Activation::Relu, &x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
    }

    #[test]
    fn gelu_variants_agree_closely() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.5, 2.0] {
            let a: f64 = Activation::Gelu.apply(x);
            let b: f64 = Activation::GeluErf.apply(x);
            assert!((a - b).abs() < 1e-3, "{x}: {a} vs {b}");
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let mut rng = Rng::new(10);
        for kind in [Activation::Gelu, Activation::GeluErf, Activation::Sigmoid] {
            for _ in 0..10 {
                let x = rng.uniform(-3.0, 3.0);
                let h = 1e-5;
                let fd = (kind.apply(x + h) - kind.apply(x - h)) / (2.0 * h);
                let an: f64 = kind.derivative(x);
                let rel = (fd - an).abs() / an.abs().max(1e-12);
                assert!(rel <= 1e-6, "{kind:?} at {x}: {an} vs {fd}");
            }
        }
    }
}
