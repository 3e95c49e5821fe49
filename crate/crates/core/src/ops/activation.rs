use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Elementwise nonlinearities. Derivatives at kink points are taken as 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Relu6,
    Sigmoid,
    Swish,
    HardSigmoid,
    HSwish,
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Relu,
        Activation::Relu6,
        Activation::Sigmoid,
        Activation::Swish,
        Activation::HardSigmoid,
        Activation::HSwish,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Relu6 => "relu6",
            Activation::Sigmoid => "sigmoid",
            Activation::Swish => "swish",
            Activation::HardSigmoid => "hard_sigmoid",
            Activation::HSwish => "h_swish",
        }
    }

    #[inline]
    pub fn eval<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Relu6 => relu6(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Swish => x * sigmoid(x),
            Activation::HardSigmoid => relu6(x + T::lit(3.0)) / T::lit(6.0),
            Activation::HSwish => {
                // x·ReLU6(x+3)/6 with the saturated branches written out so
                // that h_swish(x) == x holds exactly for x ≥ 3
                let three = T::lit(3.0);
                if x <= -three {
                    T::zero()
                } else if x >= three {
                    x
                } else {
                    x * (x + three) / T::lit(6.0)
                }
            }
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        let zero = T::zero();
        let three = T::lit(3.0);
        match self {
            Activation::Relu => {
                if x > zero {
                    T::one()
                } else {
                    zero
                }
            }
            Activation::Relu6 => {
                if x > zero && x < T::lit(6.0) {
                    T::one()
                } else {
                    zero
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
            Activation::HardSigmoid => {
                if x > -three && x < three {
                    T::one() / T::lit(6.0)
                } else {
                    zero
                }
            }
            Activation::HSwish => {
                if x <= -three {
                    zero
                } else if x >= three {
                    T::one()
                } else {
                    (x + x + three) / T::lit(6.0)
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown activation kind '{s}'")))
    }
}

#[inline]
fn relu6<T: Scalar>(x: T) -> T {
    x.max(T::zero()).min(T::lit(6.0))
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation_forward<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    x.ensure_finite(kind.name())?;
    let data = x.data().iter().map(|&v| kind.eval(v)).collect();
    Tensor::new(x.dims(), data)
}

/// Gradient with respect to the activation input `x`.
pub fn activation_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    kind: Activation,
) -> Result<Tensor<T>> {
    if grad_out.dims() != x.dims() {
        return Err(Error::shape(
            "activation_backward",
            format!("grad_out {:?} vs input {:?}", grad_out.dims(), x.dims()),
        ));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| g * kind.derivative(v))
        .collect();
    Tensor::new(x.dims(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn h_swish_values() {
        let f = |x: f64| Activation::HSwish.eval(x);
        assert_eq!(f(-4.0), 0.0);
        assert_eq!(f(-3.0), 0.0);
        assert_eq!(f(0.0), 0.0);
        assert_eq!(f(1.0), 2.0 / 3.0);
        assert_eq!(f(3.0), 3.0);
        assert_eq!(f(5.0), 5.0);
        assert_eq!(f(-1.0), -1.0 / 3.0);
    }

    #[test]
    fn hard_sigmoid_values() {
        let f = |x: f64| Activation::HardSigmoid.eval(x);
        assert_eq!(f(-3.0), 0.0);
        assert_eq!(f(0.0), 0.5);
        assert_eq!(f(3.0), 1.0);
    }

    #[test]
    fn swish_values() {
        let f = |x: f64| Activation::Swish.eval(x);
        assert_eq!(f(0.0), 0.0);
        // independent sigmoid: 1 / (1 + e^-1)
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((f(1.0) - expected).abs() < 1e-15);
        assert!((f(1.0) - 0.731059).abs() < 1e-6);
        assert!((f(40.0) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_kind_is_error() {
        assert!("gelu".parse::<Activation>().is_err());
        assert_eq!("h_swish".parse::<Activation>().unwrap(), Activation::HSwish);
    }

    #[test]
    fn h_swish_tracks_swish() {
        // the largest gap sits at the kinks x = ±3, where it equals 3·σ(−3)
        let kink_gap = 3.0 / (1.0 + 3f64.exp());
        let mut worst = 0.0f64;
        for i in 0..=1200 {
            let x = -6.0 + i as f64 * 0.01;
            let hard = Activation::HSwish.eval(x);
            let soft = Activation::Swish.eval(x);
            worst = worst.max((hard - soft).abs());
        }
        assert!(worst <= kink_gap + 1e-12, "{worst}");
        assert!((worst - kink_gap).abs() < 1e-9);
        assert!(worst < 0.15);
    }

    #[test]
    fn kinks_have_zero_subgradient() {
        assert_eq!(Activation::Relu.derivative(0.0f64), 0.0);
        assert_eq!(Activation::Relu6.derivative(6.0f64), 0.0);
        assert_eq!(Activation::HardSigmoid.derivative(3.0f64), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn h_swish_saturates(x in -1e3f64..1e3) {
            let y = Activation::HSwish.eval(x);
            if x <= -3.0 { proptest::prop_assert_eq!(y, 0.0); }
            if x >= 3.0 { proptest::prop_assert_eq!(y, x); }
            let s = Activation::HardSigmoid.eval(x);
            proptest::prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
