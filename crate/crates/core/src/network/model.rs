use crate::error::{Error, Result};
use crate::layers::{
    dropout_backward, dropout_forward, global_avg_pool, global_avg_pool_backward, relu_backward,
    relu_forward, DropoutMask, Mode, QReluLayer, QReluTape, TransformLayer,
};
use crate::tensor::{Rng, Tensor};

use super::spec::{Activation, LayerSpec, NetworkSpec, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Transform weights `W`
    Weight,
    /// Transform offsets `c`
    Bias,
    /// Q-metric coupling `W̃`
    Wtilde,
    /// Q-metric gain `h`
    Gain,
    /// Q-metric threshold `b`
    Threshold,
}

impl ParamKind {
    /// Whether weight decay applies (`W` and `W̃` only).
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Wtilde)
    }
}

/// Layout entry describing one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    /// Flat indices held at zero (`W̃` diagonal or self-channel center taps).
    pub pinned: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: TransformLayer,
    act: Option<QReluLayer>,
    conv2: TransformLayer,
    shortcut: Option<TransformLayer>,
}

#[derive(Clone, Debug)]
enum Node {
    Transform(TransformLayer),
    Relu,
    QRelu(QReluLayer),
    Dropout(f64),
    Gap,
    Block(Box<Block>),
}

impl Node {
    fn name(&self) -> &'static str {
        match self {
            Node::Transform(_) => "transform layer",
            Node::Relu => "relu",
            Node::QRelu(_) => "q-relu",
            Node::Dropout(_) => "dropout",
            Node::Gap => "pooling",
            Node::Block(_) => "residual block",
        }
    }
}

#[derive(Clone, Debug)]
enum ActTape {
    Relu(Tensor),
    QRelu(QReluTape),
}

#[derive(Clone, Debug)]
enum NodeTape {
    Transform(Tensor),
    Relu(Tensor),
    QRelu(QReluTape),
    Dropout(DropoutMask),
    Gap(Vec<usize>),
    Block {
        input: Tensor,
        act: ActTape,
        mid: Tensor,
        sum: Tensor,
    },
}

/// Intermediate values recorded by [`Network::forward`].
#[derive(Clone, Debug)]
pub struct NetTape {
    nodes: Vec<NodeTape>,
}

/// Runtime model instantiated from a [`NetworkSpec`].
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    nodes: Vec<Node>,
}

fn conv_layer(cout: usize, cin: usize, kernel: usize, stride: usize) -> Result<TransformLayer> {
    TransformLayer::conv(
        Tensor::zeros(&[cout, cin, kernel, kernel]),
        Tensor::zeros(&[cout]),
        stride,
        kernel / 2,
    )
}

fn qrelu_layer(c: usize, kernel: usize, steps: usize, groups: usize) -> Result<QReluLayer> {
    QReluLayer::conv(
        Tensor::zeros(&[c, c / groups, kernel, kernel]),
        Tensor::zeros(&[c]),
        Tensor::zeros(&[c]),
        steps,
        groups,
    )
}

fn channels(s: Shape) -> usize {
    match s {
        Shape::Map { c, .. } => c,
        Shape::Flat(n) => n,
    }
}

fn transform_params<'a>(t: &'a TransformLayer, out: &mut Vec<&'a Tensor>) {
    out.push(&t.weight);
    out.push(&t.bias);
}

fn qrelu_params<'a>(q: &'a QReluLayer, out: &mut Vec<&'a Tensor>) {
    out.extend([&q.wtilde, &q.h, &q.b]);
}

fn transform_slots(t: &TransformLayer, name: &str, out: &mut Vec<ParamSlot>) {
    for (suffix, kind, tensor) in [("W", ParamKind::Weight, &t.weight), ("c", ParamKind::Bias, &t.bias)] {
        out.push(ParamSlot {
            name: format!("{name}.{suffix}"),
            kind,
            shape: tensor.shape().to_vec(),
            pinned: Vec::new(),
        });
    }
}

fn qrelu_slots(q: &QReluLayer, name: &str, out: &mut Vec<ParamSlot>) {
    out.push(ParamSlot {
        name: format!("{name}.Wtilde"),
        kind: ParamKind::Wtilde,
        shape: q.wtilde.shape().to_vec(),
        pinned: q.pinned_indices(),
    });
    for (suffix, kind) in [("h", ParamKind::Gain), ("b", ParamKind::Threshold)] {
        out.push(ParamSlot {
            name: format!("{name}.{suffix}"),
            kind,
            shape: vec![q.channels()],
            pinned: Vec::new(),
        });
    }
}

impl Network {
    /// Instantiates the spec with all parameters zero. Use
    /// [`crate::train::init_params`] for a trainable starting point.
    pub fn zeroed(spec: &NetworkSpec) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut prev = Shape::Map {
            c: spec.input[0],
            h: spec.input[1],
            w: spec.input[2],
        };
        let mut nodes = Vec::with_capacity(spec.layers.len());
        for (layer, &out) in spec.layers.iter().zip(&shapes) {
            let cin = channels(prev);
            nodes.push(match *layer {
                LayerSpec::Conv { filters, kernel, stride } => {
                    Node::Transform(conv_layer(filters, cin, kernel, stride)?)
                }
                LayerSpec::Relu => Node::Relu,
                LayerSpec::Qrelu { kernel, steps, groups } => {
                    Node::QRelu(qrelu_layer(cin, kernel, steps, groups)?)
                }
                LayerSpec::Dropout { dropout } => Node::Dropout(dropout),
                LayerSpec::Gap => Node::Gap,
                LayerSpec::ResidualBlock { filters, stride, .. } => {
                    let act = match layer.block_activation() {
                        Some(Activation::QRelu { kernel, steps }) => {
                            Some(qrelu_layer(filters, kernel, steps, 1)?)
                        }
                        _ => None,
                    };
                    let shortcut = if stride != 1 || cin != filters {
                        Some(conv_layer(filters, cin, 1, stride)?)
                    } else {
                        None
                    };
                    Node::Block(Box::new(Block {
                        conv1: conv_layer(filters, cin, 3, stride)?,
                        act,
                        conv2: conv_layer(filters, filters, 3, 1)?,
                        shortcut,
                    }))
                }
                LayerSpec::Classifier => Node::Transform(TransformLayer::dense(
                    Tensor::zeros(&[spec.classes, cin]),
                    Tensor::zeros(&[spec.classes]),
                )?),
            });
            prev = out;
        }
        Ok(Network {
            spec: spec.clone(),
            nodes,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Parameter tensors in a fixed depth-first order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node {
                Node::Transform(t) => transform_params(t, &mut out),
                Node::QRelu(q) => qrelu_params(q, &mut out),
                Node::Block(b) => {
                    transform_params(&b.conv1, &mut out);
                    if let Some(q) = &b.act {
                        qrelu_params(q, &mut out);
                    }
                    transform_params(&b.conv2, &mut out);
                    if let Some(s) = &b.shortcut {
                        transform_params(s, &mut out);
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable view matching [`Network::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for node in &mut self.nodes {
            match node {
                Node::Transform(t) => out.extend([&mut t.weight, &mut t.bias]),
                Node::QRelu(q) => out.extend([&mut q.wtilde, &mut q.h, &mut q.b]),
                Node::Block(b) => {
                    let Block { conv1, act, conv2, shortcut } = &mut **b;
                    out.extend([&mut conv1.weight, &mut conv1.bias]);
                    if let Some(q) = act {
                        out.extend([&mut q.wtilde, &mut q.h, &mut q.b]);
                    }
                    out.extend([&mut conv2.weight, &mut conv2.bias]);
                    if let Some(s) = shortcut {
                        out.extend([&mut s.weight, &mut s.bias]);
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Layout matching [`Network::params`].
    pub fn slots(&self) -> Vec<ParamSlot> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Transform(t) => transform_slots(t, &format!("{i}"), &mut out),
                Node::QRelu(q) => qrelu_slots(q, &format!("{i}"), &mut out),
                Node::Block(b) => {
                    transform_slots(&b.conv1, &format!("{i}.conv1"), &mut out);
                    if let Some(q) = &b.act {
                        qrelu_slots(q, &format!("{i}.act"), &mut out);
                    }
                    transform_slots(&b.conv2, &format!("{i}.conv2"), &mut out);
                    if let Some(s) = &b.shortcut {
                        transform_slots(s, &format!("{i}.shortcut"), &mut out);
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Re-imposes `W̃` pinned zeros, `h ∈ [0, 1]` and `b ≥ 0`.
    pub fn project(&mut self) {
        let slots = self.slots();
        for (slot, p) in slots.iter().zip(self.params_mut()) {
            match slot.kind {
                ParamKind::Wtilde => slot.pinned.iter().for_each(|&i| p.data_mut()[i] = 0.0),
                ParamKind::Gain => p.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0)),
                ParamKind::Threshold => p.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
                _ => {}
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [c, h, w] = self.spec.input;
        if x.rank() != 4 || x.shape()[1..] != [c, h, w] {
            return Err(Error::shape(format!(
                "network expects N × {c} × {h} × {w}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Logits (`N × classes`) and the tape needed by [`Network::backward`].
    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<(Tensor, NetTape)> {
        self.check_input(x)?;
        let mut tapes = Vec::with_capacity(self.nodes.len());
        let mut cur = x.clone();
        for node in &self.nodes {
            let (next, tape) = match node {
                Node::Transform(t) => {
                    let y = t.forward(&cur)?;
                    (y, NodeTape::Transform(cur))
                }
                Node::Relu => (relu_forward(&cur), NodeTape::Relu(cur)),
                Node::QRelu(q) => {
                    let (u, tape) = q.forward(&cur)?;
                    (u, NodeTape::QRelu(tape))
                }
                Node::Dropout(rate) => {
                    let (y, mask) = dropout_forward(&cur, *rate, rng, mode)?;
                    (y, NodeTape::Dropout(mask))
                }
                Node::Gap => {
                    let y = global_avg_pool(&cur)?;
                    (y, NodeTape::Gap(cur.shape().to_vec()))
                }
                Node::Block(b) => {
                    let a1 = b.conv1.forward(&cur)?;
                    let (mid, act) = match &b.act {
                        Some(q) => {
                            let (u, tape) = q.forward(&a1)?;
                            (u, ActTape::QRelu(tape))
                        }
                        None => (relu_forward(&a1), ActTape::Relu(a1)),
                    };
                    let mut sum = b.conv2.forward(&mid)?;
                    match &b.shortcut {
                        Some(s) => sum.add_assign(&s.forward(&cur)?)?,
                        None => sum.add_assign(&cur)?,
                    }
                    (
                        relu_forward(&sum),
                        NodeTape::Block {
                            input: cur,
                            act,
                            mid,
                            sum,
                        },
                    )
                }
            };
            next.check_finite(node.name())?;
            tapes.push(tape);
            cur = next;
        }
        Ok((cur, NetTape { nodes: tapes }))
    }

    /// Evaluation-mode logits.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x, Mode::Eval, &mut Rng::new(0)).map(|(y, _)| y)
    }

    /// Gradients of a scalar loss with respect to every parameter (ordered as
    /// [`Network::params`]) and to the input, given `∂loss/∂logits`.
    pub fn backward(&self, tape: &NetTape, dlogits: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        if tape.nodes.len() != self.nodes.len() {
            return Err(Error::shape("tape was recorded by a different network"));
        }
        let mut per_node: Vec<Vec<Tensor>> = Vec::with_capacity(self.nodes.len());
        let mut g = dlogits.clone();
        for (node, t) in self.nodes.iter().zip(&tape.nodes).rev() {
            let mut grads = Vec::new();
            g = match (node, t) {
                (Node::Transform(layer), NodeTape::Transform(x)) => {
                    let tg = layer.backward(x, &g)?;
                    grads.extend([tg.weight, tg.bias]);
                    tg.input
                }
                (Node::Relu, NodeTape::Relu(x)) => relu_backward(x, &g)?,
                (Node::QRelu(q), NodeTape::QRelu(qt)) => {
                    let qg = q.backward(qt, &g)?;
                    grads.extend([qg.wtilde, qg.h, qg.b]);
                    qg.z
                }
                (Node::Dropout(_), NodeTape::Dropout(mask)) => dropout_backward(mask, &g)?,
                (Node::Gap, NodeTape::Gap(shape)) => global_avg_pool_backward(shape, &g)?,
                (Node::Block(b), NodeTape::Block { input, act, mid, sum }) => {
                    let ds = relu_backward(sum, &g)?;
                    let g2 = b.conv2.backward(mid, &ds)?;
                    let (da1, act_grads) = match (&b.act, act) {
                        (Some(q), ActTape::QRelu(qt)) => {
                            let qg = q.backward(qt, &g2.input)?;
                            (qg.z, vec![qg.wtilde, qg.h, qg.b])
                        }
                        (None, ActTape::Relu(a1)) => (relu_backward(a1, &g2.input)?, Vec::new()),
                        _ => return Err(Error::shape("block tape mismatch")),
                    };
                    let g1 = b.conv1.backward(input, &da1)?;
                    let mut dx = g1.input;
                    grads.extend([g1.weight, g1.bias]);
                    grads.extend(act_grads);
                    grads.extend([g2.weight, g2.bias]);
                    match &b.shortcut {
                        Some(s) => {
                            let gs = s.backward(input, &ds)?;
                            dx.add_assign(&gs.input)?;
                            grads.extend([gs.weight, gs.bias]);
                        }
                        None => dx.add_assign(&ds)?,
                    }
                    dx
                }
                _ => return Err(Error::shape("tape was recorded by a different network")),
            };
            per_node.push(grads);
        }
        let params = per_node.into_iter().rev().flatten().collect();
        Ok((params, g))
    }
}
