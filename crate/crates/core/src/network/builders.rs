use crate::error::{Error, Result};

use super::spec::{LayerSpec, NetworkSpec};

pub const PLAINNET_DEPTHS: [usize; 4] = [3, 6, 9, 12];

/// Width and regularization knobs for the PlainNet family. The published
/// columns use `width = 96` (the wide stages use `2 × width`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlainNetOptions {
    pub width: usize,
    pub input_dropout: f64,
    pub dropout: f64,
    /// Image side length (square inputs, 3 channels).
    pub image: usize,
}

impl Default for PlainNetOptions {
    fn default() -> Self {
        PlainNetOptions {
            width: 96,
            input_dropout: 0.2,
            dropout: 0.5,
            image: 32,
        }
    }
}

#[derive(Clone, Copy)]
enum Width {
    Base,
    Wide,
    Classes,
}

/// `(width, kernel, stride, dropout after the activation)`
type Row = (Width, usize, usize, bool);

fn plainnet_rows(depth: usize) -> Option<Vec<Row>> {
    use Width::*;
    let rows = match depth {
        3 => vec![(Base, 3, 1, false), (Base, 3, 2, false), (Classes, 3, 2, false)],
        6 => vec![
            (Base, 3, 1, false),
            (Base, 3, 1, false),
            (Base, 3, 2, true),
            (Wide, 3, 1, false),
            (Wide, 3, 1, false),
            (Classes, 3, 2, false),
        ],
        9 => vec![
            (Base, 3, 1, false),
            (Base, 3, 1, false),
            (Base, 3, 2, true),
            (Wide, 3, 1, false),
            (Wide, 3, 1, false),
            (Wide, 3, 2, true),
            (Wide, 3, 1, false),
            (Wide, 1, 1, false),
            (Classes, 1, 1, false),
        ],
        12 => vec![
            (Base, 3, 1, false),
            (Base, 3, 1, false),
            (Base, 3, 2, true),
            (Wide, 3, 1, false),
            (Wide, 3, 1, false),
            (Wide, 3, 2, true),
            (Wide, 3, 1, false),
            (Wide, 3, 2, false),
            (Wide, 3, 1, false),
            (Wide, 1, 1, false),
            (Classes, 1, 1, false),
        ],
        _ => return None,
    };
    Some(rows)
}

/// Builds a PlainNet column. With `steps = Some(T)` every ReLU becomes a
/// Q-metric ReLU whose kernel matches the preceding convolution.
pub fn build_plainnet_with(
    depth: usize,
    classes: usize,
    steps: Option<usize>,
    opts: PlainNetOptions,
) -> Result<NetworkSpec> {
    let rows = plainnet_rows(depth)
        .ok_or_else(|| Error::Spec(format!("PlainNet depth {depth} not in {PLAINNET_DEPTHS:?}")))?;
    let mut layers = vec![LayerSpec::Dropout {
        dropout: opts.input_dropout,
    }];
    for (width, kernel, stride, drop) in rows {
        let filters = match width {
            Width::Base => opts.width,
            Width::Wide => 2 * opts.width,
            Width::Classes => classes,
        };
        layers.push(LayerSpec::Conv { filters, kernel, stride });
        layers.push(match steps {
            Some(steps) => LayerSpec::Qrelu { kernel, steps, groups: 1 },
            None => LayerSpec::Relu,
        });
        if drop {
            layers.push(LayerSpec::Dropout { dropout: opts.dropout });
        }
    }
    layers.push(LayerSpec::Gap);
    let prefix = if steps.is_some() { "detrame-plainnet" } else { "plainnet" };
    let spec = NetworkSpec {
        name: format!("{prefix}-{depth}"),
        classes,
        input: [3, opts.image, opts.image],
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn build_plainnet(depth: usize, classes: usize) -> Result<NetworkSpec> {
    build_plainnet_with(depth, classes, None, PlainNetOptions::default())
}

pub fn build_detrame_plainnet(depth: usize, classes: usize, steps: usize) -> Result<NetworkSpec> {
    if steps == 0 {
        return Err(Error::Spec("T must be at least 1".into()));
    }
    build_plainnet_with(depth, classes, Some(steps), PlainNetOptions::default())
}

/// `6n + 2`-layer residual network with stage widths `16q, 32q, 64q`.
/// With `detrame` the activation between the two convolutions of every block
/// is a 3×3 Q-metric ReLU unrolled `steps` times.
pub fn build_resnet(n: usize, q: usize, classes: usize, detrame: bool, steps: usize) -> Result<NetworkSpec> {
    if n == 0 || q == 0 {
        return Err(Error::Spec("ResNet needs n ≥ 1 and q ≥ 1".into()));
    }
    if detrame && steps == 0 {
        return Err(Error::Spec("T must be at least 1".into()));
    }
    let mut layers = vec![LayerSpec::Conv { filters: 16, kernel: 3, stride: 1 }, LayerSpec::Relu];
    for (stage, mult) in [1, 2, 4].into_iter().enumerate() {
        for block in 0..n {
            layers.push(LayerSpec::ResidualBlock {
                filters: 16 * q * mult,
                stride: if stage > 0 && block == 0 { 2 } else { 1 },
                steps: detrame.then_some(steps),
                kernel: 3,
            });
        }
    }
    layers.push(LayerSpec::Gap);
    layers.push(LayerSpec::Classifier);
    let prefix = if detrame { "detrame-resnet" } else { "resnet" };
    let spec = NetworkSpec {
        name: format!("{prefix}-{}-{q}", 6 * n + 2),
        classes,
        input: [3, 32, 32],
        layers,
    };
    spec.validate()?;
    Ok(spec)
}
