//! Gradient-check suites over every layer kind, attention block and a small
//! end-to-end model.
//!
//! Each case is checked on five consecutive seeds starting at the base seed.
//! Linear operations must match to `1e-6` relative error, everything else to
//! `1e-5`; whole-model loss gradients to `1e-4`.

use crate::activations::ActivationKind;
use crate::attention::{AttentionBlock, AttentionConfig, AttentionKind, CbamChannelGate, CbamSpatialGate, EcaExcitation, SeExcitation};
use crate::error::Result;
use crate::gradcheck::{check_gradients_seeded, random_tensor, randomize_params, FaultInjected, GradReport, GradcheckConfig};
use crate::layers::{
    Activation, BatchNorm2d, Conv2d, ConvSpec, Dense, Flatten, GlobalAvgPool, Layer, LayerParams, MaxPool2d, Mode, Padding,
};
use crate::models::{init_params, Model, ModelSpec};
use crate::rng::SplitMix64;
use crate::tensor::{Shape4, Tensor};
use crate::train_eval::LossProbe;

pub const SEEDS: u64 = 5;
pub const LINEAR_TOL: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub report: GradReport,
}

/// Optional corruption applied to every unit: its backward pass is scaled by
/// the factor.
#[derive(Debug, Clone, Copy, Default)]
pub struct Fault(pub Option<f64>);

type Unit = Box<dyn Layer>;

fn case(
    name: &str,
    tol: f64,
    base_seed: u64,
    fault: Fault,
    make: impl FnMut(&mut SplitMix64) -> Result<(Unit, Tensor)>,
) -> CaseResult {
    case_with(name, GradcheckConfig::with_tol(tol), base_seed, fault, Some(0.5), make)
}

/// `param_std` of `None` keeps the parameters `make` produced.
fn case_with(
    name: &str,
    cfg: GradcheckConfig,
    base_seed: u64,
    fault: Fault,
    param_std: Option<f64>,
    mut make: impl FnMut(&mut SplitMix64) -> Result<(Unit, Tensor)>,
) -> CaseResult {
    let report = check_gradients_seeded(
        |seed| {
            let mut rng = SplitMix64::stream(seed, 0x6365_7274);
            let (mut unit, x) = make(&mut rng)?;
            if let Some(std) = param_std {
                randomize_params(&mut unit, std, &mut rng);
            }
            let unit: Unit = match fault.0 {
                Some(factor) => Box::new(FaultInjected { inner: unit, factor }),
                None => unit,
            };
            Ok((unit, x))
        },
        &cfg,
        SEEDS,
        base_seed,
    );
    CaseResult {
        name: name.to_string(),
        report,
    }
}

/// Multiplies the inner output by a fixed tensor. Batch normalization
/// outputs sum to a constant, so their plain sum has a zero input gradient
/// and would certify nothing.
struct Weighted<L> {
    inner: L,
    weights: Tensor,
}

impl<L: Layer> Layer for Weighted<L> {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.inner.forward(x, mode)?.mul(&self.weights)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        self.inner.backward(&upstream.mul(&self.weights)?)
    }

    fn params(&self) -> Vec<&LayerParams> {
        self.inner.params()
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        self.inner.params_mut()
    }
}

fn input(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    random_tensor(shape, 1.0, rng)
}

/// Convolution, dense, normalization, pooling, activation and loss kernels.
pub fn layer_suite(base_seed: u64, fault: Fault) -> Vec<CaseResult> {
    let conv = |cin: usize, spec: ConvSpec, shape: [usize; 4]| {
        move |rng: &mut SplitMix64| -> Result<(Unit, Tensor)> {
            Ok((Box::new(Conv2d::new(cin, spec)), input(&shape, rng)))
        }
    };
    let act = |kind: ActivationKind| {
        move |rng: &mut SplitMix64| -> Result<(Unit, Tensor)> {
            Ok((Box::new(Activation::new(kind)), input(&[2, 3, 4, 4], rng)))
        }
    };
    vec![
        case("dense", LINEAR_TOL, base_seed, fault, |rng| {
            Ok((Box::new(Dense::new(6, 4, true)), input(&[3, 6], rng)))
        }),
        case(
            "conv3x3_same",
            LINEAR_TOL,
            base_seed,
            fault,
            conv(3, ConvSpec::new(4, 3, 1, Padding::Same, true), [2, 3, 6, 5]),
        ),
        case(
            "conv3x3_stride2",
            LINEAR_TOL,
            base_seed,
            fault,
            conv(2, ConvSpec::new(3, 3, 2, Padding::Explicit(1, 1), false), [2, 2, 7, 6]),
        ),
        case(
            "conv1x1",
            LINEAR_TOL,
            base_seed,
            fault,
            conv(4, ConvSpec::new(5, 1, 1, Padding::Valid, true), [2, 4, 3, 3]),
        ),
        case(
            "conv1x1_stride2",
            LINEAR_TOL,
            base_seed,
            fault,
            conv(3, ConvSpec::new(2, 1, 2, Padding::Valid, false), [1, 3, 5, 5]),
        ),
        case(
            "conv7x7_stride2",
            LINEAR_TOL,
            base_seed,
            fault,
            conv(2, ConvSpec::new(2, 7, 2, Padding::Explicit(3, 3), false), [1, 2, 9, 9]),
        ),
        case("batchnorm_train", DEFAULT_TOL, base_seed, fault, |rng| {
            let shape = [4, 3, 3, 3];
            let weights = input(&shape, rng);
            let bn = Weighted {
                inner: BatchNorm2d::new(3),
                weights,
            };
            Ok((Box::new(bn), input(&shape, rng)))
        }),
        case("maxpool2x2", DEFAULT_TOL, base_seed, fault, |rng| {
            Ok((Box::new(MaxPool2d::new(2, 2)), input(&[2, 3, 6, 5], rng)))
        }),
        case("maxpool3x3_stride2", DEFAULT_TOL, base_seed, fault, |rng| {
            Ok((Box::new(MaxPool2d::new(3, 2)), input(&[2, 2, 7, 7], rng)))
        }),
        case("global_avg_pool", LINEAR_TOL, base_seed, fault, |rng| {
            Ok((Box::new(GlobalAvgPool::default()), input(&[2, 3, 4, 5], rng)))
        }),
        case("flatten", LINEAR_TOL, base_seed, fault, |rng| {
            Ok((Box::new(Flatten::default()), input(&[2, 3, 2, 2], rng)))
        }),
        case("relu", DEFAULT_TOL, base_seed, fault, act(ActivationKind::Relu)),
        case("elu", DEFAULT_TOL, base_seed, fault, act(ActivationKind::Elu { alpha: 1.0 })),
        case("elu_alpha0.5", DEFAULT_TOL, base_seed, fault, act(ActivationKind::Elu { alpha: 0.5 })),
        case("selu", DEFAULT_TOL, base_seed, fault, act(ActivationKind::Selu)),
        case("sigmoid", DEFAULT_TOL, base_seed, fault, act(ActivationKind::Sigmoid)),
        case("softmax_xent", DEFAULT_TOL, base_seed, fault, |rng| {
            let labels = (0..4).map(|_| rng.next_below(5)).collect();
            let mut dense = Dense::new(3, 5, true);
            randomize_params(&mut dense, 1.0, rng);
            let probe = LossProbe::new(dense, labels);
            Ok((Box::new(probe), input(&[4, 3], rng)))
        }),
    ]
}

/// SE, ECA and CBAM blocks and their individual gates.
pub fn attention_suite(base_seed: u64, fault: Fault) -> Vec<CaseResult> {
    let block = |cfg: AttentionConfig, shape: [usize; 4]| {
        move |rng: &mut SplitMix64| -> Result<(Unit, Tensor)> {
            Ok((Box::new(AttentionBlock::new(&cfg, shape[1])?), input(&shape, rng)))
        }
    };
    let with = |kind: AttentionKind, r: usize, act: ActivationKind| AttentionConfig {
        mlp_activation: Some(act),
        ..AttentionConfig::new(kind).with_r(r)
    };
    let relu = ActivationKind::Relu;
    let elu = ActivationKind::Elu { alpha: 1.0 };
    let small_cbam = AttentionConfig {
        spatial_kernel: 3,
        ..with(AttentionKind::Cbam, 2, elu)
    };
    let eca_fixed = AttentionConfig {
        eca_fixed_k: Some(5),
        ..AttentionConfig::new(AttentionKind::Eca)
    };
    vec![
        case("se_relu", DEFAULT_TOL, base_seed, fault, block(with(AttentionKind::Se, 2, relu), [2, 8, 4, 4])),
        case("se_elu", DEFAULT_TOL, base_seed, fault, block(with(AttentionKind::Se, 4, elu), [3, 8, 3, 5])),
        case("se_excitation", DEFAULT_TOL, base_seed, fault, |rng| {
            let cfg = with(AttentionKind::Se, 2, elu);
            Ok((Box::new(SeExcitation::new(6, &cfg)?), input(&[2, 6, 3, 3], rng)))
        }),
        case(
            "eca_adaptive",
            DEFAULT_TOL,
            base_seed,
            fault,
            block(AttentionConfig::new(AttentionKind::Eca), [2, 16, 3, 3]),
        ),
        case("eca_k5", DEFAULT_TOL, base_seed, fault, block(eca_fixed, [2, 6, 4, 3])),
        case("eca_excitation", DEFAULT_TOL, base_seed, fault, |rng| {
            let cfg = AttentionConfig {
                eca_fixed_k: Some(3),
                ..AttentionConfig::new(AttentionKind::Eca)
            };
            Ok((Box::new(EcaExcitation::new(4, &cfg)?), input(&[2, 4, 2, 2], rng)))
        }),
        case("cbam_relu", DEFAULT_TOL, base_seed, fault, block(with(AttentionKind::Cbam, 2, relu), [2, 4, 5, 5])),
        case("cbam_elu_k3", DEFAULT_TOL, base_seed, fault, block(small_cbam, [2, 6, 4, 6])),
        case("cbam_channel_gate", DEFAULT_TOL, base_seed, fault, |rng| {
            let cfg = with(AttentionKind::Cbam, 2, elu);
            Ok((Box::new(CbamChannelGate::new(4, &cfg)?), input(&[2, 4, 3, 3], rng)))
        }),
        case("cbam_spatial_gate", DEFAULT_TOL, base_seed, fault, |rng| {
            let cfg = AttentionConfig::new(AttentionKind::Cbam);
            Ok((Box::new(CbamSpatialGate::new(&cfg)?), input(&[2, 3, 5, 4], rng)))
        }),
    ]
}

/// Small model: two convolutions, one attention block and a dense head.
pub fn tiny_model_spec(kind: AttentionKind) -> ModelSpec {
    ModelSpec::toy_vgg(vec![vec![4], vec![8]], vec![8], Shape4 { n: 1, c: 2, h: 8, w: 8 }, 3)
        .with_attention(AttentionConfig::new(kind).with_r(2))
}

/// Checks [`tiny_model_spec`] for every attention kind through the
/// cross-entropy loss. Parameters keep their He initialization; heavier
/// random weights saturate the softmax and push the gradients below the
/// finite-difference noise floor.
pub fn model_suite(base_seed: u64, fault: Fault) -> Vec<CaseResult> {
    [AttentionKind::None, AttentionKind::Se, AttentionKind::Eca, AttentionKind::Cbam]
        .into_iter()
        .map(|kind| {
            let cfg = GradcheckConfig::with_tol(MODEL_TOL);
            case_with(&format!("tiny_vgg_{kind}"), cfg, base_seed, fault, None, move |rng| {
                let mut model = Model::build(&tiny_model_spec(kind))?;
                init_params(&mut model, rng.next_u64());
                let labels = (0..3).map(|_| rng.next_below(3)).collect();
                let probe = LossProbe::new(model, labels);
                Ok((Box::new(probe), input(&[3, 2, 8, 8], rng)))
            })
        })
        .collect()
}

/// Confirms the oracle rejects a backward pass scaled by 1.01.
pub fn fault_detection(base_seed: u64) -> CaseResult {
    let mut r = case("dense_fault_1.01", LINEAR_TOL, base_seed, Fault(Some(1.01)), |rng| {
        Ok((Box::new(Dense::new(6, 4, true)), input(&[3, 6], rng)))
    });
    r.name = "dense_fault_1.01 (must fail)".into();
    r
}
