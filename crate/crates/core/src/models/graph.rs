use crate::attention::AttentionBlock;
use crate::error::Result;
use crate::layers::{
    Activation, BatchNorm2d, BnState, Conv2d, Dense, Flatten, GlobalAvgPool, Layer, LayerParams, MaxPool2d, Mode,
};
use crate::tensor::Tensor;

/// One step of a model's layer sequence.
#[derive(Debug, Clone)]
pub(crate) enum Node {
    Conv(Conv2d),
    Bn(BatchNorm2d),
    Act(Activation),
    Pool(MaxPool2d),
    Attention(AttentionBlock),
    Flatten(Flatten),
    Dense(Dense),
    Gap(GlobalAvgPool),
    Residual(Box<Residual>),
}

impl Node {
    fn layer(&mut self) -> &mut dyn Layer {
        match self {
            Node::Conv(l) => l,
            Node::Bn(l) => l,
            Node::Act(l) => l,
            Node::Pool(l) => l,
            Node::Attention(l) => l,
            Node::Flatten(l) => l,
            Node::Dense(l) => l,
            Node::Gap(l) => l,
            Node::Residual(l) => l.as_mut(),
        }
    }

    fn params(&self) -> Vec<&LayerParams> {
        match self {
            Node::Conv(l) => l.params(),
            Node::Bn(l) => l.params(),
            Node::Attention(l) => l.params(),
            Node::Dense(l) => l.params(),
            Node::Residual(r) => r.params(),
            Node::Act(_) | Node::Pool(_) | Node::Flatten(_) | Node::Gap(_) => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        self.layer().params_mut()
    }

    pub(crate) fn bn_states<'a>(&'a self, out: &mut Vec<&'a BnState>) {
        match self {
            Node::Bn(bn) => out.push(&bn.state),
            Node::Residual(r) => r.all_nodes().for_each(|n| n.bn_states(out)),
            _ => {}
        }
    }

    pub(crate) fn bn_states_mut<'a>(&'a mut self, out: &mut Vec<&'a mut BnState>) {
        match self {
            Node::Bn(bn) => out.push(&mut bn.state),
            Node::Residual(r) => r.all_nodes_mut().for_each(|n| n.bn_states_mut(out)),
            _ => {}
        }
    }

    pub(crate) fn attention_count(&self) -> usize {
        match self {
            Node::Attention(_) => 1,
            Node::Residual(r) => r.all_nodes().map(Node::attention_count).sum(),
            _ => 0,
        }
    }

    pub(crate) fn attention_blocks_mut<'a>(&'a mut self, out: &mut Vec<&'a mut AttentionBlock>) {
        match self {
            Node::Attention(a) => out.push(a),
            Node::Residual(r) => r.all_nodes_mut().for_each(|n| n.attention_blocks_mut(out)),
            _ => {}
        }
    }
}

pub(crate) fn seq_forward(nodes: &mut [Node], x: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut h = x.clone();
    for node in nodes {
        h = node.layer().forward(&h, mode)?;
    }
    Ok(h)
}

pub(crate) fn seq_backward(nodes: &mut [Node], upstream: &Tensor) -> Result<Tensor> {
    let mut g = upstream.clone();
    for node in nodes.iter_mut().rev() {
        g = node.layer().backward(&g)?;
    }
    Ok(g)
}

pub(crate) fn seq_params(nodes: &[Node]) -> Vec<&LayerParams> {
    nodes.iter().flat_map(Node::params).collect()
}

pub(crate) fn seq_params_mut(nodes: &mut [Node]) -> Vec<&mut LayerParams> {
    nodes.iter_mut().flat_map(Node::params_mut).collect()
}

/// `post(branch(x) + shortcut(x))`, where an empty shortcut is the identity.
#[derive(Debug, Clone)]
pub(crate) struct Residual {
    pub branch: Vec<Node>,
    pub shortcut: Vec<Node>,
    pub post: Option<Activation>,
    /// Test hook: when false the addition is dropped and only the branch
    /// flows on.
    pub skip_enabled: bool,
}

impl Residual {
    fn all_nodes(&self) -> impl Iterator<Item = &Node> {
        self.branch.iter().chain(&self.shortcut)
    }

    fn all_nodes_mut(&mut self) -> impl Iterator<Item = &mut Node> {
        self.branch.iter_mut().chain(self.shortcut.iter_mut())
    }
}

impl Layer for Residual {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let b = seq_forward(&mut self.branch, x, mode)?;
        let sum = if self.skip_enabled {
            let s = seq_forward(&mut self.shortcut, x, mode)?;
            b.add(&s)?
        } else {
            b
        };
        match &mut self.post {
            Some(act) => act.forward(&sum, mode),
            None => Ok(sum),
        }
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let d_sum = match &mut self.post {
            Some(act) => act.backward(upstream)?,
            None => upstream.clone(),
        };
        let dx = seq_backward(&mut self.branch, &d_sum)?;
        if self.skip_enabled {
            dx.add(&seq_backward(&mut self.shortcut, &d_sum)?)
        } else {
            Ok(dx)
        }
    }

    fn params(&self) -> Vec<&LayerParams> {
        let mut p = seq_params(&self.branch);
        p.extend(seq_params(&self.shortcut));
        p
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParams> {
        let mut p = seq_params_mut(&mut self.branch);
        p.extend(seq_params_mut(&mut self.shortcut));
        p
    }
}
