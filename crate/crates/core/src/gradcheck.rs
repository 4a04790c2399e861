//! Central finite-difference oracles for gradient checks.

use crate::error::Result;
use crate::layers::{
    dropout_backward, dropout_forward, global_avg_pool, global_avg_pool_backward, relu_backward,
    relu_forward, softmax_xent, Mode, QReluLayer, TransformLayer,
};
use crate::network::Network;
use crate::tensor::{conv2d_grouped, conv2d_grouped_grads, ConvGeometry, Rng, Tensor};

/// Finite-difference step used by the checks below.
pub const STEP: f64 = 1e-6;

/// `∂f/∂x` by central differences with step `h`, one coordinate at a time.
pub fn numeric_grad(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, with the denominator floored at `1e-8` so an
/// all-zero pair compares as equal.
pub fn rel_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / a.max_abs().max(b.max_abs()).max(1e-8)
}

/// Contracts an output with a fixed random-like weight so a tensor-valued map
/// becomes a scalar loss: `Σ w ⊙ y`.
pub fn probe_loss(y: &Tensor, w: &Tensor) -> f64 {
    y.dot(w).expect("probe weight shape")
}

/// Largest relative error over every gradient a check produced.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
}

fn worst(name: impl Into<String>, pairs: &[(&Tensor, &Tensor)]) -> GradCheck {
    GradCheck {
        name: name.into(),
        rel_error: pairs.iter().map(|(a, b)| rel_error(a, b)).fold(0.0, f64::max),
    }
}

/// Grouped convolution, input and kernel gradients.
pub fn check_conv2d(rng: &mut Rng, stride: usize, groups: usize) -> Result<GradCheck> {
    let x = rng.normal_tensor(&[2, 2 * groups, 5, 6], 0.0, 1.0);
    let k = rng.normal_tensor(&[2 * groups, 2, 3, 3], 0.0, 1.0);
    let geom = ConvGeometry { stride, padding: 1, groups };
    let y = conv2d_grouped(&x, &k, geom)?;
    let w = rng.normal_tensor(y.shape(), 0.0, 1.0);
    let (gx, gk) = conv2d_grouped_grads(&w, &x, &k, geom)?;
    let loss = |x: &Tensor, k: &Tensor| probe_loss(&conv2d_grouped(x, k, geom).unwrap(), &w);
    let nx = numeric_grad(&x, STEP, |t| loss(t, &k));
    let nk = numeric_grad(&k, STEP, |t| loss(&x, t));
    Ok(worst(format!("conv2d stride {stride} groups {groups}"), &[(&gx, &nx), (&gk, &nk)]))
}

fn check_transform(name: &str, layer: &TransformLayer, x: &Tensor, rng: &mut Rng) -> Result<GradCheck> {
    let y = layer.forward(x)?;
    let w = rng.normal_tensor(y.shape(), 0.0, 1.0);
    let g = layer.backward(x, &w)?;
    let nx = numeric_grad(x, STEP, |t| probe_loss(&layer.forward(t).unwrap(), &w));
    let nw = numeric_grad(&layer.weight, STEP, |t| {
        let l = TransformLayer { weight: t.clone(), ..layer.clone() };
        probe_loss(&l.forward(x).unwrap(), &w)
    });
    let nb = numeric_grad(&layer.bias, STEP, |t| {
        let l = TransformLayer { bias: t.clone(), ..layer.clone() };
        probe_loss(&l.forward(x).unwrap(), &w)
    });
    Ok(worst(name, &[(&g.input, &nx), (&g.weight, &nw), (&g.bias, &nb)]))
}

pub fn check_transform_dense(rng: &mut Rng) -> Result<GradCheck> {
    let layer = TransformLayer::dense(rng.normal_tensor(&[4, 5], 0.0, 1.0), rng.normal_tensor(&[4], 0.0, 1.0))?;
    let x = rng.normal_tensor(&[3, 5], 0.0, 1.0);
    check_transform("transform dense", &layer, &x, rng)
}

pub fn check_transform_conv(rng: &mut Rng) -> Result<GradCheck> {
    let layer = TransformLayer::conv(
        rng.normal_tensor(&[3, 2, 3, 3], 0.0, 1.0),
        rng.normal_tensor(&[3], 0.0, 1.0),
        2,
        1,
    )?;
    let x = rng.normal_tensor(&[2, 2, 5, 5], 0.0, 1.0);
    check_transform("transform conv", &layer, &x, rng)
}

fn random_qrelu(rng: &mut Rng, dense: bool, channels: usize, steps: usize, groups: usize) -> Result<QReluLayer> {
    let h = rng.uniform_tensor(&[channels], 0.3, 1.0);
    let b = rng.uniform_tensor(&[channels], 0.0, 0.2);
    let mut layer = if dense {
        QReluLayer::dense(Tensor::zeros(&[channels, channels]), h, b, steps)?
    } else {
        QReluLayer::conv(Tensor::zeros(&[channels, channels / groups, 3, 3]), h, b, steps, groups)?
    };
    let scale = if dense { 0.3 } else { 0.15 };
    layer.wtilde = rng.uniform_tensor(layer.wtilde.shape(), -scale, scale);
    for i in layer.pinned_indices() {
        layer.wtilde.data_mut()[i] = 0.0;
    }
    Ok(layer)
}

/// Q-metric ReLU gradients for `Z`, `W̃`, `h` and `b` after `steps` unrolled steps.
pub fn check_qrelu(rng: &mut Rng, dense: bool, steps: usize) -> Result<GradCheck> {
    let (layer, z) = if dense {
        (random_qrelu(rng, true, 5, steps, 1)?, rng.normal_tensor(&[3, 5], 0.0, 1.0))
    } else {
        (random_qrelu(rng, false, 4, steps, 2)?, rng.normal_tensor(&[2, 4, 4, 4], 0.0, 1.0))
    };
    let (y, tape) = layer.forward(&z)?;
    let w = rng.normal_tensor(y.shape(), 0.0, 1.0);
    let g = layer.backward(&tape, &w)?;
    let run = |l: &QReluLayer, z: &Tensor| probe_loss(&l.forward(z).unwrap().0, &w);
    let nz = numeric_grad(&z, STEP, |t| run(&layer, t));
    let nw = numeric_grad(&layer.wtilde, STEP, |t| run(&QReluLayer { wtilde: t.clone(), ..layer.clone() }, &z));
    let nh = numeric_grad(&layer.h, STEP, |t| run(&QReluLayer { h: t.clone(), ..layer.clone() }, &z));
    let nb = numeric_grad(&layer.b, STEP, |t| run(&QReluLayer { b: t.clone(), ..layer.clone() }, &z));
    let form = if dense { "dense" } else { "conv" };
    Ok(worst(
        format!("q-relu {form} T={steps}"),
        &[(&g.z, &nz), (&g.wtilde, &nw), (&g.h, &nh), (&g.b, &nb)],
    ))
}

/// ReLU, inverted dropout (fixed mask), global average pooling and softmax
/// cross-entropy.
pub fn check_simple_layers(rng: &mut Rng) -> Result<Vec<GradCheck>> {
    let x = rng.normal_tensor(&[2, 3, 3, 4], 0.0, 1.0);
    let w = rng.normal_tensor(x.shape(), 0.0, 1.0);
    let relu = relu_backward(&x, &w)?;
    let nrelu = numeric_grad(&x, STEP, |t| probe_loss(&relu_forward(t), &w));

    let seed = rng.next_u64();
    let (_, mask) = dropout_forward(&x, 0.4, &mut Rng::new(seed), Mode::Train)?;
    let drop = dropout_backward(&mask, &w)?;
    let ndrop = numeric_grad(&x, STEP, |t| {
        probe_loss(&dropout_forward(t, 0.4, &mut Rng::new(seed), Mode::Train).unwrap().0, &w)
    });

    let wp = rng.normal_tensor(&[2, 3], 0.0, 1.0);
    let gap = global_avg_pool_backward(x.shape(), &wp)?;
    let ngap = numeric_grad(&x, STEP, |t| probe_loss(&global_avg_pool(t).unwrap(), &wp));

    let logits = rng.normal_tensor(&[4, 3], 0.0, 2.0);
    let labels = [0, 2, 1, 2];
    let (_, gl) = softmax_xent(&logits, &labels)?;
    let nl = numeric_grad(&logits, STEP, |t| softmax_xent(t, &labels).unwrap().0);

    Ok(vec![
        worst("relu", &[(&relu, &nrelu)]),
        worst("dropout", &[(&drop, &ndrop)]),
        worst("global average pool", &[(&gap, &ngap)]),
        worst("softmax cross-entropy", &[(&gl, &nl)]),
    ])
}

/// End-to-end loss gradient of `net` on `(x, labels)` against finite
/// differences for the input and every parameter. Dropout masks are held fixed.
pub fn check_network(name: &str, net: &Network, x: &Tensor, labels: &[usize], seed: u64) -> Result<GradCheck> {
    let loss_of = |n: &Network, x: &Tensor| {
        let (logits, _) = n.forward(x, Mode::Train, &mut Rng::new(seed)).unwrap();
        softmax_xent(&logits, labels).unwrap().0
    };
    let (logits, tape) = net.forward(x, Mode::Train, &mut Rng::new(seed))?;
    let (_, dlogits) = softmax_xent(&logits, labels)?;
    let (grads, gx) = net.backward(&tape, &dlogits)?;
    let mut numeric = vec![numeric_grad(x, STEP, |t| loss_of(net, t))];
    for i in 0..grads.len() {
        let base = net.params()[i].clone();
        numeric.push(numeric_grad(&base, STEP, |t| {
            let mut probe = net.clone();
            *probe.params_mut()[i] = t.clone();
            loss_of(&probe, x)
        }));
    }
    let analytic: Vec<&Tensor> = std::iter::once(&gx).chain(&grads).collect();
    let pairs: Vec<(&Tensor, &Tensor)> = analytic.into_iter().zip(&numeric).collect();
    Ok(worst(name, &pairs))
}
