//! VGG and ResNet builders with attention attachments.
//!
//! A [`Model`] is an ordered sequence of layers in which ResNet bottlenecks
//! appear as residual nodes. Parameters are visited in a fixed registry order
//! (build order, branch before shortcut), which is also the order used by
//! initialization and checkpoints.

mod build;
mod checkpoint;
mod graph;
mod spec;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, model_from_bytes, save_checkpoint, spec_hash, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use spec::{Family, ModelSpec, VggIntegration};

use graph::{seq_backward, seq_forward, seq_params, seq_params_mut, Node};

use crate::attention::AttentionBlock;
use crate::error::{Error, Result};
use crate::layers::{BnState, Layer, LayerParams, Mode, ParamKind};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    nodes: Vec<Node>,
}

impl Model {
    /// Builds a zero-initialized model; call [`init_params`] before use.
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        Ok(Self {
            spec: spec.clone(),
            nodes: build::build_nodes(spec)?,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Parameters with their registry names, in registry order.
    pub fn named_params(&self) -> Vec<(&str, &LayerParams)> {
        self.params().into_iter().map(|p| (p.name.as_str(), p)).collect()
    }

    pub fn attention_count(&self) -> usize {
        self.nodes.iter().map(Node::attention_count).sum()
    }

    pub fn attention_blocks_mut(&mut self) -> Vec<&mut AttentionBlock> {
        let mut out = Vec::new();
        self.nodes.iter_mut().for_each(|n| n.attention_blocks_mut(&mut out));
        out
    }

    pub fn bn_states(&self) -> Vec<&BnState> {
        let mut out = Vec::new();
        self.nodes.iter().for_each(|n| n.bn_states(&mut out));
        out
    }

    pub fn bn_states_mut(&mut self) -> Vec<&mut BnState> {
        let mut out = Vec::new();
        self.nodes.iter_mut().for_each(|n| n.bn_states_mut(&mut out));
        out
    }

    /// Enables or drops every residual addition. Only meant for tests that
    /// check the skip connections carry signal.
    pub fn set_skip_connections(&mut self, enabled: bool) {
        for node in &mut self.nodes {
            if let Node::Residual(r) = node {
                r.skip_enabled = enabled;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(LayerParams::zero_grads);
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.dims4()?;
        let want = self.spec.input;
        if (s.c, s.h, s.w) != (want.c, want.h, want.w) {
            return Err(Error::shape(format!(
                "model expects (N, {}, {}, {}), got {s}",
                want.c, want.h, want.w
            )));
        }
        Ok(())
    }
}

impl Layer for Model {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        seq_forward(&mut self.nodes, x, mode)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        seq_backward(&mut self.nodes, upstream)
    }

    fn params(&self) -> Vec<&LayerParams> {
        seq_params(&self.nodes)
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        seq_params_mut(&mut self.nodes)
    }
}

pub fn build_vgg(spec: &ModelSpec) -> Result<Model> {
    if spec.family != Family::Vgg {
        return Err(Error::Config(format!("build_vgg called with family {}", spec.family)));
    }
    Model::build(spec)
}

pub fn build_resnet(spec: &ModelSpec) -> Result<Model> {
    if spec.family == Family::Vgg {
        return Err(Error::Config("build_resnet called with family vgg".into()));
    }
    Model::build(spec)
}

/// Weights, biases and normalization scales/shifts; running statistics are
/// not counted.
pub fn count_params(m: &Model) -> usize {
    m.param_count()
}

/// Logits of shape `(N, classes)`.
pub fn model_forward(m: &mut Model, x: &Tensor, mode: Mode) -> Result<Tensor> {
    m.forward(x, mode)
}

/// Accumulates parameter gradients for the last forward pass and returns the
/// gradient with respect to the input.
pub fn model_backward(m: &mut Model, grad_logits: &Tensor) -> Result<Tensor> {
    m.backward(grad_logits)
}

/// He fan-in normal initialization.
///
/// Parameter `i` of the registry draws from `SplitMix64::stream(seed, i)`, so
/// each tensor depends only on the seed and its position. Weights get
/// `N(0, 2 / fan_in)`, biases 0, normalization scales 1 and shifts 0. Running
/// statistics are reset.
pub fn init_params(m: &mut Model, seed: u64) {
    for (i, p) in m.params_mut().into_iter().enumerate() {
        init_one(p, seed, i as u64);
    }
    for state in m.bn_states_mut() {
        let channels = state.running_mean.len();
        *state = BnState::new(channels);
    }
}

/// Applies the same rule as [`init_params`] to a single parameter set.
pub fn init_one(p: &mut LayerParams, seed: u64, index: u64) {
    if p.kind == ParamKind::Norm {
        p.weights.data_mut().fill(1.0);
    } else {
        let std = (2.0 / p.fan_in() as f64).sqrt();
        let mut rng = SplitMix64::stream(seed, index);
        for w in p.weights.data_mut() {
            *w = rng.next_normal() * std;
        }
    }
    if let Some(b) = p.bias.as_mut() {
        b.data_mut().fill(0.0);
    }
    p.zero_grads();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_param_count, AttentionConfig, AttentionKind};
    use crate::tensor::Shape4;

    fn toy(kind: AttentionKind) -> ModelSpec {
        ModelSpec::toy_vgg(vec![vec![4], vec![8]], vec![16], Shape4::new(1, 3, 8, 8).unwrap(), 3)
            .with_attention(AttentionConfig::new(kind).with_r(4))
    }

    #[test]
    fn single_dense_count() {
        let spec = ModelSpec::toy_vgg(vec![vec![1]], vec![], Shape4::new(1, 1, 2, 2).unwrap(), 7);
        let m = Model::build(&spec).unwrap();
        // conv 1x1x3x3 + 1, dense 1 -> 7
        assert_eq!(count_params(&m), 10 + 7 + 7);
    }

    #[test]
    fn toy_forward_shape() {
        let mut m = Model::build(&toy(AttentionKind::Se)).unwrap();
        init_params(&mut m, 3);
        let x = Tensor::full(&[5, 3, 8, 8], 0.3);
        let y = model_forward(&mut m, &x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[5, 3]);
        assert!(model_forward(&mut m, &Tensor::zeros(&[1, 3, 9, 8]), Mode::Train).is_err());
    }

    #[test]
    fn attention_adds_its_count() {
        let base = count_params(&Model::build(&toy(AttentionKind::None)).unwrap());
        for kind in [AttentionKind::Se, AttentionKind::Eca, AttentionKind::Cbam] {
            let m = Model::build(&toy(kind)).unwrap();
            let extra = attention_param_count(&AttentionConfig::new(kind).with_r(4), 8).unwrap();
            assert_eq!(count_params(&m), base + extra, "{kind}");
            assert_eq!(m.attention_count(), 1);
        }
    }

    #[test]
    fn init_determinism() {
        let spec = toy(AttentionKind::Cbam);
        let mut a = Model::build(&spec).unwrap();
        let mut b = Model::build(&spec).unwrap();
        init_params(&mut a, 1);
        init_params(&mut b, 1);
        let flat = |m: &Model| m.params().iter().flat_map(|p| p.weights.data().to_vec()).collect::<Vec<_>>();
        assert_eq!(flat(&a), flat(&b));
        init_params(&mut b, 2);
        assert_ne!(flat(&a), flat(&b));
    }

    #[test]
    fn registry_names_unique() {
        let m = Model::build(&ModelSpec::resnet(50).with_attention(AttentionConfig::new(AttentionKind::Cbam))).unwrap();
        let mut names: Vec<&str> = m.named_params().iter().map(|(n, _)| *n).collect();
        assert!(names.iter().all(|n| !n.is_empty()));
        let total = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), total);
    }
}
