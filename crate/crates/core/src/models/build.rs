use super::graph::{Node, Residual};
use super::spec::{Family, ModelSpec, VggIntegration};
use crate::attention::{AttentionBlock, AttentionConfig, AttentionKind};
use crate::error::{Error, Result};
use crate::layers::{Activation, BatchNorm2d, Conv2d, ConvSpec, Dense, Flatten, GlobalAvgPool, MaxPool2d, Padding};

/// Tracks the per-sample feature shape while layers are appended.
#[derive(Debug, Clone, Copy)]
struct Dims {
    c: usize,
    h: usize,
    w: usize,
}

struct Ctx<'a> {
    spec: &'a ModelSpec,
    attention: AttentionConfig,
}

impl Ctx<'_> {
    fn conv(&self, name: &str, d: &mut Dims, out: usize, k: usize, stride: usize, pad: Padding, bias: bool) -> Result<Node> {
        let cs = ConvSpec::new(out, k, stride, pad, bias);
        let (h, w) = cs.output_hw(d.h, d.w)?;
        let mut conv = Conv2d::new(d.c, cs);
        conv.params.name = name.to_string();
        *d = Dims { c: out, h, w };
        Ok(Node::Conv(conv))
    }

    fn bn(&self, name: &str, d: &Dims) -> Node {
        let mut bn = BatchNorm2d::new(d.c);
        bn.params.name = name.to_string();
        Node::Bn(bn)
    }

    fn act(&self) -> Node {
        Node::Act(Activation::new(self.spec.activation))
    }

    fn pool(&self, d: &mut Dims, window: usize, stride: usize) -> Result<Node> {
        if d.h < window || d.w < window {
            return Err(Error::DegenerateOutput(format!(
                "{window}x{window} pooling does not fit a {}x{} map",
                d.h, d.w
            )));
        }
        d.h = (d.h - window) / stride + 1;
        d.w = (d.w - window) / stride + 1;
        Ok(Node::Pool(MaxPool2d::new(window, stride)))
    }

    fn attention(&self, name: &str, d: &Dims) -> Result<Option<Node>> {
        if self.attention.kind == AttentionKind::None {
            return Ok(None);
        }
        let mut block = AttentionBlock::new(&self.attention, d.c)?;
        block.set_names(name);
        Ok(Some(Node::Attention(block)))
    }

    fn dense(&self, name: &str, inputs: usize, outputs: usize) -> Node {
        let mut fc = Dense::new(inputs, outputs, true);
        fc.params.name = name.to_string();
        Node::Dense(fc)
    }
}

pub(crate) fn build_nodes(spec: &ModelSpec) -> Result<Vec<Node>> {
    spec.validate()?;
    let ctx = Ctx {
        spec,
        attention: spec.resolved_attention(),
    };
    let mut d = Dims {
        c: spec.input.c,
        h: spec.input.h,
        w: spec.input.w,
    };
    match spec.family {
        Family::Vgg => vgg(&ctx, &mut d),
        Family::ResNetV1 | Family::ResNetV2 => resnet(&ctx, &mut d),
    }
}

fn vgg(ctx: &Ctx, d: &mut Dims) -> Result<Vec<Node>> {
    let spec = ctx.spec;
    let stages = spec.vgg_layout()?;
    let total_convs: usize = stages.iter().map(Vec::len).sum();
    let integration = spec.vgg_integration;
    if integration == VggIntegration::M3 && ctx.attention.kind != AttentionKind::None && total_convs < 11 {
        return Err(Error::Config(format!(
            "integration m3 needs at least 11 convolutions, the network has {total_convs}"
        )));
    }
    let attach_after = |index: usize| match integration {
        VggIntegration::M1 => true,
        VggIntegration::M2 => false,
        VggIntegration::M3 => index == 11 || index == 14,
    };

    let mut nodes = Vec::new();
    let mut index = 0;
    for stage in &stages {
        for &width in stage {
            index += 1;
            nodes.push(ctx.conv(&format!("conv{index}"), d, width, 3, 1, Padding::Same, true)?);
            nodes.push(ctx.act());
            if attach_after(index) {
                nodes.extend(ctx.attention(&format!("conv{index}.attn"), d)?);
            }
        }
        nodes.push(ctx.pool(d, 2, 2)?);
    }
    let at_head = match integration {
        VggIntegration::M1 => false,
        VggIntegration::M2 => true,
        VggIntegration::M3 => total_convs < 14,
    };
    if at_head {
        nodes.extend(ctx.attention("head.attn", d)?);
    }

    nodes.push(Node::Flatten(Flatten::default()));
    let mut width = d.c * d.h * d.w;
    for (i, &hidden) in spec.fc_widths.iter().enumerate() {
        nodes.push(ctx.dense(&format!("fc{}", i + 1), width, hidden));
        nodes.push(ctx.act());
        width = hidden;
    }
    nodes.push(ctx.dense(&format!("fc{}", spec.fc_widths.len() + 1), width, spec.classes));
    Ok(nodes)
}

fn resnet(ctx: &Ctx, d: &mut Dims) -> Result<Vec<Node>> {
    let spec = ctx.spec;
    let v2 = spec.family == Family::ResNetV2;
    let layout = spec.resnet_layout()?;

    let mut nodes = vec![ctx.conv("stem.conv", d, 64, 7, 2, Padding::Explicit(3, 3), false)?];
    if !v2 {
        nodes.push(ctx.bn("stem.bn", d));
        nodes.push(ctx.act());
    }
    nodes.push(ctx.pool(d, 3, 2)?);

    for (s, &blocks) in layout.iter().enumerate() {
        let width = 64 << s;
        for b in 0..blocks {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let prefix = format!("stage{}.block{b}", s + 1);
            nodes.push(Node::Residual(Box::new(bottleneck(ctx, &prefix, d, width, stride, b == 0, v2)?)));
        }
    }

    if v2 {
        nodes.push(ctx.bn("final.bn", d));
        nodes.push(ctx.act());
    }
    nodes.push(Node::Gap(GlobalAvgPool::default()));
    nodes.push(ctx.dense("fc", d.c, spec.classes));
    Ok(nodes)
}

/// 1x1 reduce, 3x3 (strided), 1x1 expand to `4 * width`, with attention on
/// the branch output.
fn bottleneck(ctx: &Ctx, prefix: &str, d: &mut Dims, width: usize, stride: usize, project: bool, v2: bool) -> Result<Residual> {
    let input = *d;
    let out = 4 * width;
    let mut branch = Vec::new();
    let convs = [(width, 1, 1, Padding::Valid), (width, 3, stride, Padding::Explicit(1, 1)), (out, 1, 1, Padding::Valid)];
    for (i, &(c_out, k, st, pad)) in convs.iter().enumerate() {
        let n = i + 1;
        if v2 {
            branch.push(ctx.bn(&format!("{prefix}.bn{n}"), d));
            branch.push(ctx.act());
            branch.push(ctx.conv(&format!("{prefix}.conv{n}"), d, c_out, k, st, pad, false)?);
        } else {
            branch.push(ctx.conv(&format!("{prefix}.conv{n}"), d, c_out, k, st, pad, false)?);
            branch.push(ctx.bn(&format!("{prefix}.bn{n}"), d));
            if n < 3 {
                branch.push(ctx.act());
            }
        }
    }
    branch.extend(ctx.attention(&format!("{prefix}.attn"), d)?);

    let mut shortcut = Vec::new();
    if project {
        let mut sd = input;
        shortcut.push(ctx.conv(&format!("{prefix}.proj.conv"), &mut sd, out, 1, stride, Padding::Valid, false)?);
        shortcut.push(ctx.bn(&format!("{prefix}.proj.bn"), &sd));
        if (sd.h, sd.w) != (d.h, d.w) {
            return Err(Error::shape(format!(
                "{prefix}: shortcut {}x{} does not match branch {}x{}",
                sd.h, sd.w, d.h, d.w
            )));
        }
    } else if input.c != out {
        return Err(Error::shape(format!("{prefix}: identity shortcut from {} to {out} channels", input.c)));
    }

    Ok(Residual {
        branch,
        shortcut,
        post: (!v2).then(|| Activation::new(ctx.spec.activation)),
        skip_enabled: true,
    })
}
