use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::conv_out_extent;

/// In-block activation of a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    QRelu { kernel: usize, steps: usize },
}

/// One entry of a [`NetworkSpec`]. Serialized with a `kind` tag; the
/// remaining keys are `filters`, `kernel`, `stride`, `dropout`, `T` and `groups`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Convolutional transform `z ↦ W * z − c` with same padding `kernel / 2`.
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    /// Convolutional Q-metric ReLU on the preceding transform's channels.
    /// `T` is the unroll count.
    Qrelu {
        kernel: usize,
        #[serde(rename = "T")]
        steps: usize,
        #[serde(default = "one")]
        groups: usize,
    },
    Dropout {
        dropout: f64,
    },
    Gap,
    /// `conv(stride) → act → conv → + shortcut → relu`; the shortcut is a
    /// 1×1 projection whenever stride or width changes. `T` present means the
    /// in-block activation is a Q-metric ReLU with `kernel × kernel` filters.
    ResidualBlock {
        filters: usize,
        stride: usize,
        #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
        steps: Option<usize>,
        #[serde(default = "three")]
        kernel: usize,
    },
    /// Dense transform to the class logits.
    Classifier,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::Qrelu { .. } => "qrelu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Gap => "gap",
            LayerSpec::ResidualBlock { .. } => "residual-block",
            LayerSpec::Classifier => "classifier",
        }
    }

    pub fn block_activation(&self) -> Option<Activation> {
        match *self {
            LayerSpec::ResidualBlock { steps, kernel, .. } => Some(match steps {
                Some(steps) => Activation::QRelu { kernel, steps },
                None => Activation::Relu,
            }),
            _ => None,
        }
    }
}

/// Activation shape without the batch axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn size(&self) -> usize {
        match *self {
            Shape::Map { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    pub classes: usize,
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: NetworkSpec = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn qrelu_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| {
                matches!(l, LayerSpec::Qrelu { .. })
                    || matches!(l.block_activation(), Some(Activation::QRelu { .. }))
            })
            .count()
    }

    /// Shape after every layer, checking that consecutive layers compose,
    /// that every `qrelu` directly follows a `conv`, and that the network
    /// ends in `classes` logits.
    pub fn validate(&self) -> Result<Vec<Shape>> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 || self.classes == 0 {
            return Err(Error::Spec("input extents and class count must be positive".into()));
        }
        let mut shape = Shape::Map { c, h, w };
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut prev_transform = false;
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::Spec(format!("layer {i} ({}): {msg}", layer.kind()));
            shape = match (*layer, shape) {
                (LayerSpec::Conv { filters, kernel, stride }, Shape::Map { h, w, .. }) => {
                    if filters == 0 {
                        return Err(err("zero filters".into()));
                    }
                    let ho = conv_out_extent(h, kernel, stride, kernel / 2);
                    let wo = conv_out_extent(w, kernel, stride, kernel / 2);
                    match (ho, wo) {
                        (Some(h), Some(w)) => Shape::Map { c: filters, h, w },
                        _ => return Err(err(format!("kernel {kernel} stride {stride} on {h}x{w}"))),
                    }
                }
                (LayerSpec::Qrelu { kernel, steps, groups }, Shape::Map { c, .. }) => {
                    if !prev_transform {
                        return Err(err("must directly follow a conv layer".into()));
                    }
                    if kernel % 2 == 0 || steps == 0 || groups == 0 || c % groups != 0 {
                        return Err(err(format!("kernel {kernel}, T {steps}, groups {groups} on {c} channels")));
                    }
                    shape
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Dropout { dropout }, s) => {
                    if !(0.0..1.0).contains(&dropout) {
                        return Err(err(format!("rate {dropout} outside [0, 1)")));
                    }
                    s
                }
                (LayerSpec::Gap, Shape::Map { c, .. }) => Shape::Flat(c),
                (LayerSpec::ResidualBlock { filters, stride, steps, kernel }, Shape::Map { h, w, .. }) => {
                    if filters == 0 || steps == Some(0) || kernel % 2 == 0 {
                        return Err(err("invalid block parameters".into()));
                    }
                    match (conv_out_extent(h, 3, stride, 1), conv_out_extent(w, 3, stride, 1)) {
                        (Some(h), Some(w)) => Shape::Map { c: filters, h, w },
                        _ => return Err(err(format!("stride {stride} on {h}x{w}"))),
                    }
                }
                (LayerSpec::Classifier, Shape::Flat(_)) => Shape::Flat(self.classes),
                (_, s) => return Err(err(format!("cannot follow shape {s:?}"))),
            };
            prev_transform = matches!(layer, LayerSpec::Conv { .. });
            shapes.push(shape);
        }
        if shape != Shape::Flat(self.classes) {
            return Err(Error::Spec(format!(
                "network ends in {shape:?}, expected {} logits",
                self.classes
            )));
        }
        Ok(shapes)
    }

    /// Total number of trainable scalars (including pinned zero taps of `W̃`).
    pub fn param_count(&self) -> Result<usize> {
        let shapes = self.validate()?;
        let mut prev = Shape::Map {
            c: self.input[0],
            h: self.input[1],
            w: self.input[2],
        };
        let mut total = 0;
        for (layer, &out) in self.layers.iter().zip(&shapes) {
            let cin = match prev {
                Shape::Map { c, .. } => c,
                Shape::Flat(n) => n,
            };
            total += match *layer {
                LayerSpec::Conv { filters, kernel, .. } => filters * cin * kernel * kernel + filters,
                LayerSpec::Qrelu { kernel, groups, .. } => cin * (cin / groups) * kernel * kernel + 2 * cin,
                LayerSpec::ResidualBlock { filters, stride, steps, kernel } => {
                    let mut n = filters * cin * 9 + filters + filters * filters * 9 + filters;
                    if steps.is_some() {
                        n += filters * filters * kernel * kernel + 2 * filters;
                    }
                    if stride != 1 || cin != filters {
                        n += filters * cin + filters;
                    }
                    n
                }
                LayerSpec::Classifier => self.classes * cin + self.classes,
                _ => 0,
            };
            prev = out;
        }
        Ok(total)
    }
}
