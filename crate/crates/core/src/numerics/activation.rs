use super::tensor::{Real, Tensor};
use crate::error::Result;
use crate::numerics::tensor::ensure_same_shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn forward<T: Real>(self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| T::from_f64(self.apply(v.to_f64())))
    }

    /// `grad * f'(x)` where `x` is the forward input.
    pub fn backward<T: Real>(self, x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        ensure_same_shape("activation_backward", x, grad)?;
        let data = x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| T::from_f64(g.to_f64() * self.derivative(x.to_f64())))
            .collect();
        Tensor::from_vec(x.shape(), data)
    }
}
