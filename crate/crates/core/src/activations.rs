//! Pointwise activations and their derivatives.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SELU scale.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// SELU negative-branch coefficient.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
/// Default ELU coefficient.
pub const ELU_DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    Relu,
    Elu { alpha: f64 },
    Selu,
    Sigmoid,
}

impl ActivationKind {
    pub fn elu(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha.is_finite() {
            Ok(Self::Elu { alpha })
        } else {
            Err(Error::Config(format!("ELU alpha must be positive, got {alpha}")))
        }
    }

    pub fn apply(self, v: f64) -> f64 {
        match self {
            Self::Relu => v.max(0.0),
            Self::Elu { alpha } => {
                if v > 0.0 {
                    v
                } else {
                    alpha * v.exp_m1()
                }
            }
            Self::Selu => {
                SELU_LAMBDA
                    * if v > 0.0 {
                        v
                    } else {
                        SELU_ALPHA * v.exp_m1()
                    }
            }
            Self::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative at `v`.
    ///
    /// At exactly zero, ReLU reports 1 while ELU and SELU report the slope of
    /// their exponential branch (`alpha` and `lambda * alpha_s`), which is
    /// the branch their forward pass selects for `v <= 0`.
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Self::Relu => {
                if v >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Elu { alpha } => {
                if v > 0.0 {
                    1.0
                } else {
                    alpha * v.exp()
                }
            }
            Self::Selu => {
                if v > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * v.exp()
                }
            }
            Self::Sigmoid => {
                let s = sigmoid(v);
                s * (1.0 - s)
            }
        }
    }

    /// Whether the derivative jumps at the origin.
    pub fn has_kink(self) -> bool {
        match self {
            Self::Relu | Self::Selu => true,
            Self::Elu { alpha } => alpha != 1.0,
            Self::Sigmoid => false,
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Relu => f.write_str("relu"),
            Self::Elu { alpha } if *alpha == ELU_DEFAULT_ALPHA => f.write_str("elu"),
            Self::Elu { alpha } => write!(f, "elu:{alpha}"),
            Self::Selu => f.write_str("selu"),
            Self::Sigmoid => f.write_str("sigmoid"),
        }
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    /// Parses `relu`, `elu`, `elu:<alpha>`, `selu` or `sigmoid`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if let Some(alpha) = lower.strip_prefix("elu:") {
            let alpha = alpha
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad ELU alpha '{alpha}'")))?;
            return Self::elu(alpha);
        }
        match lower.as_str() {
            "relu" => Ok(Self::Relu),
            "elu" => Ok(Self::Elu {
                alpha: ELU_DEFAULT_ALPHA,
            }),
            "selu" => Ok(Self::Selu),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Logistic function, evaluated without overflow for either sign.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn act_forward(kind: ActivationKind, x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("activation input")?;
    let y = x.map(|v| kind.apply(v));
    y.ensure_finite("activation")?;
    Ok(y)
}

/// `upstream * f'(x)` elementwise.
pub fn act_backward(kind: ActivationKind, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if x.shape() != upstream.shape() {
        return Err(Error::shape(format!(
            "activation backward: input {:?} vs upstream {:?}",
            x.shape(),
            upstream.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| g * kind.derivative(v))
        .collect();
    Ok(Tensor::raw(x.shape().to_vec(), data))
}

/// Mean of the activated samples, the bias a layer hands to its successor.
pub fn mean_activation(kind: ActivationKind, samples: &Tensor) -> Result<f64> {
    Ok(act_forward(kind, samples)?.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    const ELU1: ActivationKind = ActivationKind::Elu { alpha: 1.0 };

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], &[v]).unwrap()
    }

    #[test]
    fn forward_examples() {
        assert_eq!(act_forward(ELU1, &scalar(0.0)).unwrap().data()[0], 0.0);
        let y = act_forward(ELU1, &scalar(-1.0)).unwrap().data()[0];
        assert!((y - (-0.632_120_558_828_557_7)).abs() < 1e-15);
        assert_eq!(act_forward(ActivationKind::Sigmoid, &scalar(0.0)).unwrap().data()[0], 0.5);
    }

    #[test]
    fn backward_examples() {
        let g = act_backward(ActivationKind::Relu, &scalar(-2.0), &scalar(1.0)).unwrap();
        assert_eq!(g.data()[0], 0.0);
        let g = act_backward(ELU1, &scalar(-1.0), &scalar(1.0)).unwrap();
        assert!((g.data()[0] - 0.367_879_441_171_442_33).abs() < 1e-15);
        let g = act_backward(ActivationKind::Sigmoid, &scalar(0.0), &scalar(4.0)).unwrap();
        assert_eq!(g.data()[0], 1.0);
        assert!(matches!(
            act_backward(ELU1, &scalar(0.0), &Tensor::zeros(&[2])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn origin_convention() {
        assert_eq!(ActivationKind::Relu.derivative(0.0), 1.0);
        assert_eq!(ActivationKind::Elu { alpha: 0.5 }.derivative(0.0), 0.5);
        assert_eq!(ActivationKind::Selu.derivative(0.0), SELU_LAMBDA * SELU_ALPHA);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let kinds = [
            ActivationKind::Relu,
            ELU1,
            ActivationKind::Elu { alpha: 0.3 },
            ActivationKind::Selu,
            ActivationKind::Sigmoid,
        ];
        let mut rng = SplitMix64::new(7);
        let h = 1e-6;
        for kind in kinds {
            let mut checked = 0;
            for _ in 0..100_000 {
                let v = rng.next_normal();
                if kind.has_kink() && v.abs() < 1e-4 {
                    continue;
                }
                let fd = (kind.apply(v + h) - kind.apply(v - h)) / (2.0 * h);
                let an = kind.derivative(v);
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-7, "{kind:?} at {v}: fd {fd} vs {an} (rel {rel})");
                checked += 1;
            }
            assert!(checked > 99_000);
        }
    }

    #[test]
    fn selu_is_scaled_elu() {
        let elu = ActivationKind::Elu { alpha: SELU_ALPHA };
        let mut rng = SplitMix64::new(3);
        for _ in 0..10_000 {
            let v = rng.next_normal() * 4.0;
            let lhs = ActivationKind::Selu.apply(v) / SELU_LAMBDA;
            assert!((lhs - elu.apply(v)).abs() <= 1e-15 * v.abs().max(1.0));
        }
    }

    #[test]
    fn elu_monotone_and_continuous() {
        let xs: Vec<f64> = (-4000..=4000).map(|i| i as f64 * 1e-3).collect();
        for w in xs.windows(2) {
            assert!(ELU1.apply(w[1]) > ELU1.apply(w[0]));
        }
        assert!(ELU1.apply(-1e-12).abs() < 1e-11);
    }

    #[test]
    fn sigmoid_range_and_symmetry() {
        let mut rng = SplitMix64::new(11);
        // beyond |v| ~ 36.7 the upper tail rounds to exactly 1.0 in f64
        for _ in 0..10_000 {
            let v = (rng.next_normal() * 10.0).clamp(-36.0, 36.0);
            let s = sigmoid(v);
            assert!(s > 0.0 && s < 1.0);
            assert!((sigmoid(-v) - (1.0 - s)).abs() <= 1e-15);
        }
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn mean_activation_zero_samples() {
        let z = Tensor::zeros(&[16]);
        for kind in [ActivationKind::Relu, ELU1, ActivationKind::Selu] {
            assert_eq!(mean_activation(kind, &z).unwrap(), 0.0);
        }
    }

    #[test]
    fn bias_shift_smaller_for_elu() {
        let mut rng = SplitMix64::new(2024);
        let z: Vec<f64> = (0..100_000).map(|_| rng.next_normal()).collect();
        let z = Tensor::new(&[z.len()], &z).unwrap();
        let relu = mean_activation(ActivationKind::Relu, &z).unwrap();
        let elu = mean_activation(ELU1, &z).unwrap();
        assert!((relu - 0.398_942_280_401_432_7).abs() < 0.01, "{relu}");
        assert!((elu - 0.160_520_572_266_556_1).abs() < 0.01, "{elu}");
        assert!(elu.abs() < relu.abs());
    }

    #[test]
    fn parse_names() {
        assert_eq!("ELU".parse::<ActivationKind>().unwrap(), ELU1);
        assert!("tanh".parse::<ActivationKind>().is_err());
        let e = ActivationKind::elu(0.5).unwrap();
        assert_eq!(e.to_string().parse::<ActivationKind>().unwrap(), e);
        assert!(ActivationKind::elu(0.0).is_err());
    }
}
