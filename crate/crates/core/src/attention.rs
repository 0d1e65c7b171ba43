//! Squeeze-and-excitation, efficient channel attention and CBAM blocks.
//!
//! Every block maps an `(N, C, H, W)` feature map to one of the same shape by
//! multiplying it with sigmoid gates. Channel gates have shape
//! `(N, C, 1, 1)`, spatial gates `(N, 1, H, W)`.
//!
//! The excitation parts are [`Layer`]s that map the feature map to its gate,
//! so they can be gradient-checked on their own. [`AttentionBlock`] composes
//! them with the gating multiplications.

use std::fmt;
use std::str::FromStr;

use crate::activations::ActivationKind;
use crate::error::{Error, Result};
use crate::layers::{
    channelwise_pool, channelwise_pool_backward, global_avg_pool, global_avg_pool_backward, global_max_pool,
    global_max_pool_backward, Activation, Conv2d, ConvSpec, Dense, Layer, LayerParams, Mode, Padding,
};
use crate::tensor::{reduce_to_broadcast, Shape4, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    None,
    Se,
    Eca,
    Cbam,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [Self::None, Self::Se, Self::Eca, Self::Cbam];
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Se => "se",
            Self::Eca => "eca",
            Self::Cbam => "cbam",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "se" | "sen" | "senet" => Ok(Self::Se),
            "eca" => Ok(Self::Eca),
            "cbam" => Ok(Self::Cbam),
            other => Err(Error::Config(format!("unknown attention kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    /// Reduction ratio of the SE / CBAM channel MLP.
    pub r: usize,
    pub eca_gamma: f64,
    pub eca_b: f64,
    /// Overrides the adaptive ECA kernel when set.
    pub eca_fixed_k: Option<usize>,
    /// CBAM spatial convolution size.
    pub spatial_kernel: usize,
    /// Hidden activation of the channel MLP; `None` inherits the model's
    /// activation (ReLU for standalone blocks).
    pub mlp_activation: Option<ActivationKind>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            kind: AttentionKind::None,
            r: 16,
            eca_gamma: 2.0,
            eca_b: 1.0,
            eca_fixed_k: None,
            spatial_kernel: 7,
            mlp_activation: None,
        }
    }
}

impl AttentionConfig {
    pub fn new(kind: AttentionKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn with_r(mut self, r: usize) -> Self {
        self.r = r;
        self
    }

    /// Width of the channel MLP's hidden layer.
    pub fn hidden_width(&self, channels: usize) -> Result<usize> {
        if self.r == 0 || channels % self.r != 0 {
            return Err(Error::BadReduction { r: self.r, channels });
        }
        Ok(channels / self.r)
    }

    /// ECA kernel size for `channels`, fixed or adaptive.
    pub fn eca_kernel(&self, channels: usize) -> Result<usize> {
        let k = match self.eca_fixed_k {
            Some(k) => k,
            None => eca_kernel_size(channels, self.eca_gamma, self.eca_b)?,
        };
        if k % 2 == 0 || k > 2 * channels - 1 {
            return Err(Error::BadKernel(k));
        }
        Ok(k)
    }

    /// Checks that a block of this config can sit on `channels` channels.
    pub fn validate(&self, channels: usize) -> Result<()> {
        if channels == 0 {
            return Err(Error::BadChannelCount(channels));
        }
        match self.kind {
            AttentionKind::None => Ok(()),
            AttentionKind::Se => self.hidden_width(channels).map(drop),
            AttentionKind::Eca => self.eca_kernel(channels).map(drop),
            AttentionKind::Cbam => {
                if self.spatial_kernel % 2 == 0 {
                    return Err(Error::BadKernel(self.spatial_kernel));
                }
                self.hidden_width(channels).map(drop)
            }
        }
    }

    fn mlp_act(&self) -> ActivationKind {
        self.mlp_activation.unwrap_or(ActivationKind::Relu)
    }
}

/// Adaptive ECA kernel size.
///
/// `t = floor(|log2(C) / gamma + b / gamma|)`, bumped to the next odd number
/// when even, and never below 1.
pub fn eca_kernel_size(channels: usize, gamma: f64, b: f64) -> Result<usize> {
    if channels < 1 {
        return Err(Error::BadChannelCount(channels));
    }
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("ECA gamma must be positive, got {gamma}")));
    }
    let psi = ((channels as f64).log2() / gamma + b / gamma).abs();
    let t = psi.floor() as usize;
    Ok(if t % 2 == 1 { t } else { t + 1 })
}

/// Learnable scalars a block of `cfg` allocates on `channels` channels.
pub fn attention_param_count(cfg: &AttentionConfig, channels: usize) -> Result<usize> {
    cfg.validate(channels)?;
    Ok(match cfg.kind {
        AttentionKind::None => 0,
        AttentionKind::Se => mlp_param_count(channels, cfg.hidden_width(channels)?),
        AttentionKind::Eca => cfg.eca_kernel(channels)?,
        AttentionKind::Cbam => {
            let s = cfg.spatial_kernel;
            mlp_param_count(channels, cfg.hidden_width(channels)?) + 2 * s * s + 1
        }
    })
}

fn mlp_param_count(c: usize, hidden: usize) -> usize {
    c * hidden + hidden + hidden * c + c
}

/// Sigmoid attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct GateTensor(Tensor);

impl GateTensor {
    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_inner(self) -> Tensor {
        self.0
    }
}

/// `y = x * gate`, broadcasting the gate.
fn apply_gate(x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    x.mul(gate)
}

/// Gradients of [`apply_gate`] with respect to the map and the gate.
fn gate_backward(x: &Tensor, gate: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let dx = upstream.mul(gate)?;
    let dgate = reduce_to_broadcast(&upstream.mul(x)?, gate.shape())?;
    Ok((dx, dgate))
}

/// `C -> C/r -> C` MLP applied row-wise to `(M, C)` descriptors.
#[derive(Debug, Clone)]
struct ChannelMlp {
    fc1: Dense,
    act: Activation,
    fc2: Dense,
}

impl ChannelMlp {
    fn new(channels: usize, hidden: usize, act: ActivationKind) -> Self {
        Self {
            fc1: Dense::new(channels, hidden, true),
            act: Activation::new(act),
            fc2: Dense::new(hidden, channels, true),
        }
    }

    fn from_params(fc1: &LayerParams, fc2: &LayerParams, act: ActivationKind) -> Result<Self> {
        let (c, hidden) = match fc1.weights.shape() {
            &[c, h] => (c, h),
            other => return Err(Error::shape(format!("MLP weights {other:?}"))),
        };
        if fc2.weights.shape() != [hidden, c] {
            return Err(Error::shape(format!(
                "second MLP layer {:?} does not invert {:?}",
                fc2.weights.shape(),
                fc1.weights.shape()
            )));
        }
        let mut mlp = Self::new(c, hidden, act);
        mlp.fc1.params = fc1.clone();
        mlp.fc2.params = fc2.clone();
        Ok(mlp)
    }

    fn forward(&mut self, s: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.fc1.forward(s, mode)?;
        let a = self.act.forward(&h, mode)?;
        self.fc2.forward(&a, mode)
    }

    fn backward(&mut self, dz: &Tensor) -> Result<Tensor> {
        let da = self.fc2.backward(dz)?;
        let dh = self.act.backward(&da)?;
        self.fc1.backward(&dh)
    }

    fn set_names(&mut self, prefix: &str) {
        self.fc1.params.name = format!("{prefix}.fc1");
        self.fc2.params.name = format!("{prefix}.fc2");
    }
}

/// Squeeze (global average pool) and excitation (MLP + sigmoid).
#[derive(Debug, Clone)]
pub struct SeExcitation {
    mlp: ChannelMlp,
    sigmoid: Activation,
    input: Option<Shape4>,
}

impl SeExcitation {
    pub fn new(channels: usize, cfg: &AttentionConfig) -> Result<Self> {
        let hidden = cfg.hidden_width(channels)?;
        Ok(Self {
            mlp: ChannelMlp::new(channels, hidden, cfg.mlp_act()),
            sigmoid: Activation::new(ActivationKind::Sigmoid),
            input: None,
        })
    }
}

impl Layer for SeExcitation {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let s = x.dims4()?;
        let squeezed = global_avg_pool(x)?.reshape(&[s.n, s.c])?;
        let z = self.mlp.forward(&squeezed, mode)?;
        let gate = self.sigmoid.forward(&z, mode)?;
        self.input = Some(s);
        gate.reshape(&[s.n, s.c, 1, 1])
    }

    fn backward(&mut self, dgate: &Tensor) -> Result<Tensor> {
        let s = self.input.take().ok_or(Error::StaleCache)?;
        let dz = self.sigmoid.backward(&dgate.reshape(&[s.n, s.c])?)?;
        let ds = self.mlp.backward(&dz)?;
        global_avg_pool_backward(s, &ds.reshape(&[s.n, s.c, 1, 1])?)
    }

    fn params(&self) -> Vec<&LayerParams> {
        vec![&self.mlp.fc1.params, &self.mlp.fc2.params]
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        vec![&mut self.mlp.fc1.params, &mut self.mlp.fc2.params]
    }
}

/// Squeeze followed by a `k`-tap 1-D convolution across channels.
///
/// Edge channels see zero padding of `(k - 1) / 2`; there is no bias and no
/// dimensionality reduction.
#[derive(Debug, Clone)]
pub struct EcaExcitation {
    pub params: LayerParams,
    sigmoid: Activation,
    cache: Option<(Shape4, Vec<f64>)>,
}

impl EcaExcitation {
    pub fn new(channels: usize, cfg: &AttentionConfig) -> Result<Self> {
        let k = cfg.eca_kernel(channels)?;
        Ok(Self {
            params: LayerParams::zeros(&[k], None),
            sigmoid: Activation::new(ActivationKind::Sigmoid),
            cache: None,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.params.weights.len()
    }
}

impl Layer for EcaExcitation {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let s = x.dims4()?;
        let k = self.kernel_size();
        if k % 2 == 0 {
            return Err(Error::BadKernel(k));
        }
        let pad = (k - 1) / 2;
        let squeezed = global_avg_pool(x)?.into_data();
        let w = self.params.weights.data();
        let mut z = vec![0.0; s.n * s.c];
        for n in 0..s.n {
            let row = &squeezed[n * s.c..(n + 1) * s.c];
            for c in 0..s.c {
                z[n * s.c + c] = (0..k)
                    .filter_map(|j| (c + j).checked_sub(pad).filter(|&src| src < s.c).map(|src| w[j] * row[src]))
                    .sum();
            }
        }
        let gate = self.sigmoid.forward(&Tensor::raw(vec![s.n, s.c], z), mode)?;
        self.cache = Some((s, squeezed));
        gate.reshape(&[s.n, s.c, 1, 1])
    }

    fn backward(&mut self, dgate: &Tensor) -> Result<Tensor> {
        let (s, squeezed) = self.cache.take().ok_or(Error::StaleCache)?;
        let dz = self.sigmoid.backward(&dgate.reshape(&[s.n, s.c])?)?;
        let k = self.kernel_size();
        let pad = (k - 1) / 2;
        let mut ds = vec![0.0; s.n * s.c];
        let w = self.params.weights.data().to_vec();
        let gw = self.params.grad_weights.data_mut();
        for n in 0..s.n {
            for c in 0..s.c {
                let g = dz.data()[n * s.c + c];
                for j in 0..k {
                    if let Some(src) = (c + j).checked_sub(pad).filter(|&src| src < s.c) {
                        gw[j] += g * squeezed[n * s.c + src];
                        ds[n * s.c + src] += g * w[j];
                    }
                }
            }
        }
        global_avg_pool_backward(s, &Tensor::raw(vec![s.n, s.c, 1, 1], ds))
    }

    fn params(&self) -> Vec<&LayerParams> {
        vec![&self.params]
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        vec![&mut self.params]
    }
}

/// CBAM channel gate: one shared MLP over both the average- and max-pooled
/// descriptors, summed before the sigmoid.
#[derive(Debug, Clone)]
pub struct CbamChannelGate {
    mlp: ChannelMlp,
    sigmoid: Activation,
    cache: Option<(Shape4, Vec<usize>)>,
}

impl CbamChannelGate {
    pub fn new(channels: usize, cfg: &AttentionConfig) -> Result<Self> {
        let hidden = cfg.hidden_width(channels)?;
        Ok(Self {
            mlp: ChannelMlp::new(channels, hidden, cfg.mlp_act()),
            sigmoid: Activation::new(ActivationKind::Sigmoid),
            cache: None,
        })
    }
}

impl Layer for CbamChannelGate {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let s = x.dims4()?;
        let avg = global_avg_pool(x)?;
        let (max, argmax) = global_max_pool(x)?;
        // both descriptors go through the MLP as one (2N, C) batch
        let mut stacked = avg.into_data();
        stacked.extend_from_slice(max.data());
        let out = self.mlp.forward(&Tensor::raw(vec![2 * s.n, s.c], stacked), mode)?;
        let (top, bottom) = out.data().split_at(s.n * s.c);
        let z: Vec<f64> = top.iter().zip(bottom).map(|(a, b)| a + b).collect();
        let gate = self.sigmoid.forward(&Tensor::raw(vec![s.n, s.c], z), mode)?;
        self.cache = Some((s, argmax));
        gate.reshape(&[s.n, s.c, 1, 1])
    }

    fn backward(&mut self, dgate: &Tensor) -> Result<Tensor> {
        let (s, argmax) = self.cache.take().ok_or(Error::StaleCache)?;
        let dz = self.sigmoid.backward(&dgate.reshape(&[s.n, s.c])?)?;
        let mut doubled = dz.data().to_vec();
        doubled.extend_from_slice(dz.data());
        let d_desc = self.mlp.backward(&Tensor::raw(vec![2 * s.n, s.c], doubled))?;
        let (d_avg, d_max) = d_desc.data().split_at(s.n * s.c);
        let pooled = [s.n, s.c, 1, 1];
        let dx_avg = global_avg_pool_backward(s, &Tensor::raw(pooled.to_vec(), d_avg.to_vec()))?;
        let dx_max = global_max_pool_backward(s, &argmax, &Tensor::raw(pooled.to_vec(), d_max.to_vec()))?;
        dx_avg.add(&dx_max)
    }

    fn params(&self) -> Vec<&LayerParams> {
        vec![&self.mlp.fc1.params, &self.mlp.fc2.params]
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        vec![&mut self.mlp.fc1.params, &mut self.mlp.fc2.params]
    }
}

/// CBAM spatial gate: channel mean/max planes, a `s x s` convolution with
/// same padding, then a sigmoid.
#[derive(Debug, Clone)]
pub struct CbamSpatialGate {
    pub conv: Conv2d,
    sigmoid: Activation,
    cache: Option<(Shape4, Vec<usize>)>,
}

impl CbamSpatialGate {
    pub fn new(cfg: &AttentionConfig) -> Result<Self> {
        if cfg.spatial_kernel % 2 == 0 {
            return Err(Error::BadKernel(cfg.spatial_kernel));
        }
        Ok(Self {
            conv: Conv2d::new(2, ConvSpec::new(1, cfg.spatial_kernel, 1, Padding::Same, true)),
            sigmoid: Activation::new(ActivationKind::Sigmoid),
            cache: None,
        })
    }
}

impl Layer for CbamSpatialGate {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let s = x.dims4()?;
        let (descriptor, argmax) = channelwise_pool(x)?;
        let z = self.conv.forward(&descriptor, mode)?;
        let gate = self.sigmoid.forward(&z, mode)?;
        self.cache = Some((s, argmax));
        Ok(gate)
    }

    fn backward(&mut self, dgate: &Tensor) -> Result<Tensor> {
        let (s, argmax) = self.cache.take().ok_or(Error::StaleCache)?;
        let dz = self.sigmoid.backward(dgate)?;
        let d_desc = self.conv.backward(&dz)?;
        channelwise_pool_backward(s, &argmax, &d_desc)
    }

    fn params(&self) -> Vec<&LayerParams> {
        vec![&self.conv.params]
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        vec![&mut self.conv.params]
    }
}

#[derive(Debug, Clone)]
enum Gates {
    Se(SeExcitation),
    Eca(EcaExcitation),
    Cbam(CbamChannelGate, CbamSpatialGate),
}

#[derive(Debug, Clone)]
struct BlockCache {
    x: Tensor,
    channel_gate: Tensor,
    /// Channel-refined map and spatial gate (CBAM only).
    spatial: Option<(Tensor, Tensor)>,
}

/// A complete attention block, `(N, C, H, W) -> (N, C, H, W)`.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    kind: AttentionKind,
    channels: usize,
    gates: Gates,
    cache: Option<BlockCache>,
}

impl AttentionBlock {
    /// Zero-initialized block for `channels` channels.
    ///
    /// Fails for `AttentionKind::None` and for configs that do not fit.
    pub fn new(cfg: &AttentionConfig, channels: usize) -> Result<Self> {
        cfg.validate(channels)?;
        let gates = match cfg.kind {
            AttentionKind::None => return Err(Error::Config("attention kind 'none' has no block".into())),
            AttentionKind::Se => Gates::Se(SeExcitation::new(channels, cfg)?),
            AttentionKind::Eca => Gates::Eca(EcaExcitation::new(channels, cfg)?),
            AttentionKind::Cbam => Gates::Cbam(CbamChannelGate::new(channels, cfg)?, CbamSpatialGate::new(cfg)?),
        };
        Ok(Self {
            kind: cfg.kind,
            channels,
            gates,
            cache: None,
        })
    }

    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn set_names(&mut self, prefix: &str) {
        match &mut self.gates {
            Gates::Se(se) => se.mlp.set_names(prefix),
            Gates::Eca(eca) => eca.params.name = format!("{prefix}.eca"),
            Gates::Cbam(ch, sp) => {
                ch.mlp.set_names(prefix);
                sp.conv.params.name = format!("{prefix}.spatial");
            }
        }
    }

    /// Forward pass that also returns the gates (channel first, then
    /// spatial for CBAM).
    pub fn forward_with_gates(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<GateTensor>)> {
        let s = x.dims4()?;
        if s.c != self.channels {
            return Err(Error::shape(format!(
                "attention block built for {} channels got {}",
                self.channels, s.c
            )));
        }
        let (y, cache) = match &mut self.gates {
            Gates::Se(g) => {
                let gate = g.forward(x, mode)?;
                (apply_gate(x, &gate)?, BlockCache { x: x.clone(), channel_gate: gate, spatial: None })
            }
            Gates::Eca(g) => {
                let gate = g.forward(x, mode)?;
                (apply_gate(x, &gate)?, BlockCache { x: x.clone(), channel_gate: gate, spatial: None })
            }
            Gates::Cbam(ch, sp) => {
                let cg = ch.forward(x, mode)?;
                let refined = apply_gate(x, &cg)?;
                let sg = sp.forward(&refined, mode)?;
                let y = apply_gate(&refined, &sg)?;
                (
                    y,
                    BlockCache {
                        x: x.clone(),
                        channel_gate: cg,
                        spatial: Some((refined, sg)),
                    },
                )
            }
        };
        let mut gates = vec![GateTensor(cache.channel_gate.clone())];
        if let Some((_, sg)) = &cache.spatial {
            gates.push(GateTensor(sg.clone()));
        }
        self.cache = Some(cache);
        Ok((y, gates))
    }
}

impl Layer for AttentionBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_with_gates(x, mode)?.0)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or(Error::StaleCache)?;
        let d_refined = match (&mut self.gates, &cache.spatial) {
            (Gates::Cbam(_, sp), Some((refined, sg))) => {
                let (direct, dsg) = gate_backward(refined, sg, upstream)?;
                direct.add(&sp.backward(&dsg)?)?
            }
            _ => upstream.clone(),
        };
        let (direct, dcg) = gate_backward(&cache.x, &cache.channel_gate, &d_refined)?;
        let through_gate = match &mut self.gates {
            Gates::Se(g) => g.backward(&dcg)?,
            Gates::Eca(g) => g.backward(&dcg)?,
            Gates::Cbam(ch, _) => ch.backward(&dcg)?,
        };
        direct.add(&through_gate)
    }

    fn params(&self) -> Vec<&LayerParams> {
        match &self.gates {
            Gates::Se(g) => g.params(),
            Gates::Eca(g) => g.params(),
            Gates::Cbam(ch, sp) => {
                let mut p = ch.params();
                p.extend(sp.params());
                p
            }
        }
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        match &mut self.gates {
            Gates::Se(g) => g.params_mut(),
            Gates::Eca(g) => g.params_mut(),
            Gates::Cbam(ch, sp) => {
                let mut p = ch.params_mut();
                p.extend(sp.params_mut());
                p
            }
        }
    }
}

fn check_kind(cfg: &AttentionConfig, expect: AttentionKind) -> Result<()> {
    if cfg.kind == expect {
        Ok(())
    } else {
        Err(Error::Config(format!("expected a {expect} config, got {}", cfg.kind)))
    }
}

/// SE block with explicit MLP parameters `fc1: (C, C/r)` and `fc2: (C/r, C)`.
pub fn se_block_forward(
    x: &Tensor,
    fc1: &LayerParams,
    fc2: &LayerParams,
    cfg: &AttentionConfig,
) -> Result<(Tensor, GateTensor)> {
    check_kind(cfg, AttentionKind::Se)?;
    let c = x.dims4()?.c;
    if fc1.weights.shape() != [c, cfg.hidden_width(c)?] {
        return Err(Error::shape(format!("SE fc1 {:?} for {c} channels, r = {}", fc1.weights.shape(), cfg.r)));
    }
    let mut block = AttentionBlock::new(cfg, c)?;
    if let Gates::Se(g) = &mut block.gates {
        g.mlp = ChannelMlp::from_params(fc1, fc2, cfg.mlp_act())?;
    }
    let (y, mut gates) = block.forward_with_gates(x, Mode::Infer)?;
    Ok((y, gates.remove(0)))
}

/// ECA block with explicit `(k,)` kernel taps.
pub fn eca_block_forward(x: &Tensor, p: &LayerParams, cfg: &AttentionConfig) -> Result<(Tensor, GateTensor)> {
    check_kind(cfg, AttentionKind::Eca)?;
    let c = x.dims4()?.c;
    let k = cfg.eca_kernel(c)?;
    if p.weights.shape() != [k] || p.bias.is_some() {
        return Err(Error::shape(format!("ECA taps {:?}, expected [{k}] without bias", p.weights.shape())));
    }
    let mut block = AttentionBlock::new(cfg, c)?;
    if let Gates::Eca(g) = &mut block.gates {
        g.params = p.clone();
    }
    let (y, mut gates) = block.forward_with_gates(x, Mode::Infer)?;
    Ok((y, gates.remove(0)))
}

/// CBAM channel gate with explicit shared-MLP parameters.
pub fn cbam_channel_forward(
    x: &Tensor,
    fc1: &LayerParams,
    fc2: &LayerParams,
    cfg: &AttentionConfig,
) -> Result<GateTensor> {
    let c = x.dims4()?.c;
    let hidden = cfg.hidden_width(c)?;
    if fc1.weights.shape() != [c, hidden] {
        return Err(Error::shape(format!("CBAM fc1 {:?} for {c} channels", fc1.weights.shape())));
    }
    let mut gate = CbamChannelGate::new(c, cfg)?;
    gate.mlp = ChannelMlp::from_params(fc1, fc2, cfg.mlp_act())?;
    Ok(GateTensor(gate.forward(x, Mode::Infer)?))
}

/// CBAM spatial gate with explicit `(1, 2, s, s)` convolution parameters.
pub fn cbam_spatial_forward(x: &Tensor, p: &LayerParams, cfg: &AttentionConfig) -> Result<GateTensor> {
    let mut gate = CbamSpatialGate::new(cfg)?;
    let expect = gate.conv.params.weights.shape().to_vec();
    if p.weights.shape() != expect {
        return Err(Error::shape(format!("CBAM spatial conv {:?}, expected {expect:?}", p.weights.shape())));
    }
    gate.conv.params = p.clone();
    Ok(GateTensor(gate.forward(x, Mode::Infer)?))
}

/// Parameters of a full CBAM block.
#[derive(Debug, Clone)]
pub struct CbamParams {
    pub fc1: LayerParams,
    pub fc2: LayerParams,
    pub spatial: LayerParams,
}

impl CbamParams {
    pub fn zeros(channels: usize, cfg: &AttentionConfig) -> Result<Self> {
        let hidden = cfg.hidden_width(channels)?;
        let s = cfg.spatial_kernel;
        Ok(Self {
            fc1: LayerParams::zeros(&[channels, hidden], Some(hidden)),
            fc2: LayerParams::zeros(&[hidden, channels], Some(channels)),
            spatial: LayerParams::zeros(&[1, 2, s, s], Some(1)),
        })
    }
}

/// Channel gate, then spatial gate on the channel-refined map.
pub fn cbam_block_forward(
    x: &Tensor,
    params: &CbamParams,
    cfg: &AttentionConfig,
) -> Result<(Tensor, (GateTensor, GateTensor))> {
    check_kind(cfg, AttentionKind::Cbam)?;
    let channel = cbam_channel_forward(x, &params.fc1, &params.fc2, cfg)?;
    let refined = apply_gate(x, channel.values())?;
    let spatial = cbam_spatial_forward(&refined, &params.spatial, cfg)?;
    let y = apply_gate(&refined, spatial.values())?;
    Ok((y, (channel, spatial)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::sigmoid;
    use crate::gradcheck::{randomize_params, random_tensor};
    use crate::rng::SplitMix64;

    fn cfg(kind: AttentionKind, r: usize) -> AttentionConfig {
        AttentionConfig::new(kind).with_r(r)
    }

    fn ramp(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, &(0..n).map(|i| (i as f64 * 0.37).sin() * 2.0).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn eca_kernel_examples() {
        assert_eq!(eca_kernel_size(64, 2.0, 1.0).unwrap(), 3);
        assert_eq!(eca_kernel_size(256, 2.0, 1.0).unwrap(), 5);
        assert_eq!(eca_kernel_size(2048, 2.0, 1.0).unwrap(), 7);
        assert_eq!(eca_kernel_size(1, 2.0, 1.0).unwrap(), 1);
        assert!(matches!(eca_kernel_size(0, 2.0, 1.0), Err(Error::BadChannelCount(0))));
    }

    #[test]
    fn eca_kernel_always_odd() {
        for c in 1..5000 {
            for (g, b) in [(2.0, 1.0), (1.0, 0.0), (3.0, 2.5), (0.5, -3.0)] {
                let k = eca_kernel_size(c, g, b).unwrap();
                assert!(k % 2 == 1 && k >= 1);
            }
        }
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(attention_param_count(&cfg(AttentionKind::Se, 4), 16).unwrap(), 148);
        assert_eq!(attention_param_count(&cfg(AttentionKind::Eca, 16), 64).unwrap(), 3);
        assert_eq!(attention_param_count(&cfg(AttentionKind::Cbam, 4), 16).unwrap(), 247);
        assert_eq!(attention_param_count(&cfg(AttentionKind::None, 4), 16).unwrap(), 0);
        assert!(matches!(
            attention_param_count(&cfg(AttentionKind::Se, 3), 16),
            Err(Error::BadReduction { r: 3, channels: 16 })
        ));
    }

    #[test]
    fn se_zero_params_halves() {
        let x = ramp(&[2, 4, 3, 3]);
        let c = cfg(AttentionKind::Se, 2);
        let fc1 = LayerParams::zeros(&[4, 2], Some(2));
        let fc2 = LayerParams::zeros(&[2, 4], Some(4));
        let (y, gate) = se_block_forward(&x, &fc1, &fc2, &c).unwrap();
        assert!(gate.values().data().iter().all(|&g| g == 0.5));
        assert!(y.max_abs_diff(&x.scale(0.5)) <= 1e-12);
    }

    #[test]
    fn se_identity_mlp_by_hand() {
        // channel means (1, -1)
        let x = Tensor::new(&[1, 2, 1, 2], &[0.5, 1.5, -2.0, 0.0]).unwrap();
        let eye = Tensor::new(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let fc1 = LayerParams::new(eye.clone(), Some(Tensor::zeros(&[2])));
        let fc2 = LayerParams::new(eye, Some(Tensor::zeros(&[2])));
        let mut c = cfg(AttentionKind::Se, 1);
        c.mlp_activation = Some(ActivationKind::Relu);
        let (y, gate) = se_block_forward(&x, &fc1, &fc2, &c).unwrap();
        let g = gate.values().data();
        assert!((g[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(g[1], 0.5);
        assert!((y.data()[0] - 0.5 * g[0]).abs() < 1e-15);
        assert_eq!(&y.data()[2..], &[-1.0, 0.0]);
    }

    #[test]
    fn eca_examples() {
        let x = ramp(&[1, 4, 2, 2]);
        let c = AttentionConfig {
            eca_fixed_k: Some(3),
            ..cfg(AttentionKind::Eca, 1)
        };
        let (y, g) = eca_block_forward(&x, &LayerParams::zeros(&[3], None), &c).unwrap();
        assert!(g.values().data().iter().all(|&v| v == 0.5));
        assert!(y.max_abs_diff(&x.scale(0.5)) <= 1e-12);

        // k = 1 with unit tap is sigmoid of the channel mean
        let k1 = AttentionConfig {
            eca_fixed_k: Some(1),
            ..c
        };
        let unit = LayerParams::new(Tensor::ones(&[1]), None);
        let (_, g) = eca_block_forward(&x, &unit, &k1).unwrap();
        let means = global_avg_pool(&x).unwrap();
        for (gv, m) in g.values().data().iter().zip(means.data()) {
            assert_eq!(*gv, sigmoid(*m));
        }

        // channel means (1, 0, 0, 1), taps (1, 1, 1): every z is 1
        let mut data = vec![0.0; 16];
        data[..4].fill(1.0);
        data[12..].fill(1.0);
        let x = Tensor::new(&[1, 4, 2, 2], &data).unwrap();
        let taps = LayerParams::new(Tensor::ones(&[3]), None);
        let (_, g) = eca_block_forward(&x, &taps, &c).unwrap();
        for v in g.values().data() {
            assert!((v - 0.731_058_578_630_004_9).abs() < 1e-15);
        }
    }

    #[test]
    fn eca_even_kernel_rejected() {
        let c = AttentionConfig {
            eca_fixed_k: Some(4),
            ..cfg(AttentionKind::Eca, 1)
        };
        assert!(matches!(AttentionBlock::new(&c, 8), Err(Error::BadKernel(4))));
    }

    #[test]
    fn cbam_channel_examples() {
        let c = cfg(AttentionKind::Cbam, 2);
        let x = ramp(&[1, 4, 3, 3]);
        let fc1 = LayerParams::zeros(&[4, 2], Some(2));
        let fc2 = LayerParams::zeros(&[2, 4], Some(4));
        let g = cbam_channel_forward(&x, &fc1, &fc2, &c).unwrap();
        assert!(g.values().data().iter().all(|&v| v == 0.5));

        // constant map: avg == max so the gate is sigmoid(2 * MLP(v))
        let mut rng = SplitMix64::new(1);
        let fc1 = LayerParams::new(random_tensor(&[4, 2], 1.0, &mut rng), Some(random_tensor(&[2], 1.0, &mut rng)));
        let fc2 = LayerParams::new(random_tensor(&[2, 4], 1.0, &mut rng), Some(random_tensor(&[4], 1.0, &mut rng)));
        let vals = [0.3, -1.2, 2.0, 0.7];
        let mut data = Vec::new();
        for v in vals {
            data.extend([v; 9]);
        }
        let x = Tensor::new(&[1, 4, 3, 3], &data).unwrap();
        let g = cbam_channel_forward(&x, &fc1, &fc2, &c).unwrap();
        let mut mlp = ChannelMlp::from_params(&fc1, &fc2, ActivationKind::Relu).unwrap();
        let single = mlp.forward(&Tensor::new(&[1, 4], &vals).unwrap(), Mode::Infer).unwrap();
        for (gv, z) in g.values().data().iter().zip(single.data()) {
            assert!((gv - sigmoid(z + z)).abs() < 1e-15);
        }
    }

    #[test]
    fn cbam_spatial_examples() {
        let c = cfg(AttentionKind::Cbam, 1);
        let x = ramp(&[2, 3, 5, 4]);
        let g = cbam_spatial_forward(&x, &LayerParams::zeros(&[1, 2, 7, 7], Some(1)), &c).unwrap();
        assert_eq!(g.values().shape(), &[2, 1, 5, 4]);
        assert!(g.values().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn cbam_block_zero_params_quarter() {
        let c = cfg(AttentionKind::Cbam, 2);
        let x = ramp(&[2, 4, 5, 5]);
        let p = CbamParams::zeros(4, &c).unwrap();
        let (y, (gc, gs)) = cbam_block_forward(&x, &p, &c).unwrap();
        assert!(y.max_abs_diff(&x.scale(0.25)) <= 1e-12);
        assert_eq!(gc.values().shape(), &[2, 4, 1, 1]);
        assert_eq!(gs.values().shape(), &[2, 1, 5, 5]);
    }

    #[test]
    fn cbam_saturated_channel_gate_is_spatial_only() {
        let c = cfg(AttentionKind::Cbam, 2);
        let mut rng = SplitMix64::new(4);
        let x = random_tensor(&[1, 4, 6, 6], 1.0, &mut rng);
        let mut p = CbamParams::zeros(4, &c).unwrap();
        p.spatial.weights = random_tensor(&[1, 2, 7, 7], 0.2, &mut rng);
        // gate = sigmoid(2 * 20) rounds to 1 - 4e-18 ~ 1
        p.fc2.bias = Some(Tensor::full(&[4], 20.0));
        let (y, _) = cbam_block_forward(&x, &p, &c).unwrap();
        let spatial = cbam_spatial_forward(&x, &p.spatial, &c).unwrap();
        let expect = x.mul(spatial.values()).unwrap();
        assert!(y.max_abs_diff(&expect) <= 1e-6);
    }

    #[test]
    fn block_preserves_shape_and_gate_range() {
        let mut rng = SplitMix64::new(8);
        for kind in [AttentionKind::Se, AttentionKind::Eca, AttentionKind::Cbam] {
            for (n, c, h, w) in [(1, 4, 1, 1), (2, 8, 3, 5), (3, 16, 7, 2)] {
                let conf = cfg(kind, 4);
                let mut block = AttentionBlock::new(&conf, c).unwrap();
                randomize_params(&mut block, 1.0, &mut rng);
                let x = random_tensor(&[n, c, h, w], 2.0, &mut rng);
                let (y, gates) = block.forward_with_gates(&x, Mode::Train).unwrap();
                assert_eq!(y.shape(), x.shape());
                for g in gates {
                    assert!(g.values().data().iter().all(|&v| v > 0.0 && v < 1.0));
                }
                assert_eq!(block.param_count(), attention_param_count(&conf, c).unwrap());
            }
        }
    }

    #[test]
    fn eca_k1_is_permutation_equivariant() {
        let c = AttentionConfig {
            eca_fixed_k: Some(1),
            ..cfg(AttentionKind::Eca, 1)
        };
        let mut rng = SplitMix64::new(21);
        let x = random_tensor(&[1, 5, 3, 3], 1.0, &mut rng);
        let taps = LayerParams::new(Tensor::new(&[1], &[1.7]).unwrap(), None);
        let (y, _) = eca_block_forward(&x, &taps, &c).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let permute = |t: &Tensor| {
            let mut out = Vec::new();
            for &p in &perm {
                out.extend_from_slice(&t.data()[p * 9..(p + 1) * 9]);
            }
            Tensor::new(t.shape(), &out).unwrap()
        };
        let (yp, _) = eca_block_forward(&permute(&x), &taps, &c).unwrap();
        assert_eq!(yp, permute(&y));
    }

    #[test]
    fn r1_degenerate_gate() {
        for kind in [AttentionKind::Se, AttentionKind::Cbam] {
            let c = cfg(kind, 1);
            let x = ramp(&[1, 3, 2, 2]);
            let fc1 = LayerParams::zeros(&[3, 3], Some(3));
            let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
            let fc2 = LayerParams::new(Tensor::new(&[3, 3], &eye).unwrap(), Some(Tensor::zeros(&[3])));
            let gate = match kind {
                AttentionKind::Se => se_block_forward(&x, &fc1, &fc2, &c).unwrap().1,
                _ => cbam_channel_forward(&x, &fc1, &fc2, &c).unwrap(),
            };
            assert!(gate.values().data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn wrong_kind_rejected() {
        let x = ramp(&[1, 4, 2, 2]);
        let p = LayerParams::zeros(&[3], None);
        assert!(eca_block_forward(&x, &p, &cfg(AttentionKind::Se, 2)).is_err());
        assert!(AttentionBlock::new(&cfg(AttentionKind::None, 2), 4).is_err());
    }
}
