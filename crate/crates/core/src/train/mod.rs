//! Projected SGD with momentum for transform / Q-metric networks.
//!
//! After every update the metric parameters are projected back onto their
//! constraint sets: pinned `W̃` entries to zero, `h` into `[0, 1]`, `b` into
//! `[0, ∞)`.

mod checkpoint;
mod config;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{lr_at, Precision, Schedule, TrainConfig};

use crate::error::{Error, Result};
use crate::layers::{softmax_xent, Mode};
use crate::network::{Network, ParamKind};
use crate::tensor::{Rng, Tensor};

/// Momentum buffers and counters carried between steps and across checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub buffers: Vec<Tensor>,
    pub step: u64,
    /// Number of completed epochs.
    pub epoch: u64,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(net: &Network) -> Self {
        OptimizerState {
            buffers: net.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            epoch: 0,
            lr: 0.0,
        }
    }
}

/// Source of labelled minibatches.
pub trait TrainData {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Images `N × C × H × W` and labels for `indices`, optionally augmented
    /// with randomness drawn from `rng`.
    fn batch(&self, indices: &[usize], augment: bool, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)>;
}

/// In-memory images and labels without augmentation.
#[derive(Clone, Debug)]
pub struct TensorData {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl TensorData {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.batch() != labels.len() {
            return Err(Error::shape("need N × C × H × W images and N labels"));
        }
        Ok(TensorData { images, labels })
    }
}

impl TrainData for TensorData {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn batch(&self, indices: &[usize], _augment: bool, _rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
        let labels = indices
            .iter()
            .map(|&i| self.labels.get(i).copied().ok_or_else(|| Error::invalid("index out of range")))
            .collect::<Result<_>>()?;
        Ok((self.images.gather(indices)?, labels))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// `W ~ N(0, 2/fan_in)`, `c = 0`, `W̃ ~ U(−0.01, 0.01)` with pinned entries
/// zeroed, `h = 0.9`, `b = 0.01`.
pub fn init_params(net: &mut Network, rng: &mut Rng) {
    let slots = net.slots();
    for (slot, p) in slots.iter().zip(net.params_mut()) {
        match slot.kind {
            ParamKind::Weight => {
                let fan_in: usize = slot.shape[1..].iter().product();
                *p = rng.normal_tensor(&slot.shape, 0.0, (2.0 / fan_in as f64).sqrt());
            }
            ParamKind::Bias => p.fill(0.0),
            ParamKind::Wtilde => {
                *p = rng.uniform_tensor(&slot.shape, -0.01, 0.01);
                slot.pinned.iter().for_each(|&i| p.data_mut()[i] = 0.0);
            }
            ParamKind::Gain => p.fill(0.9),
            ParamKind::Threshold => p.fill(0.01),
        }
    }
}

/// One update: `v ← m·v + (g + wd·p)` (decay on `W`, `W̃` only),
/// `p ← p − lr·v`, then projection.
pub fn sgd_step(net: &mut Network, state: &mut OptimizerState, grads: &[Tensor], cfg: &TrainConfig, lr: f64) -> Result<()> {
    let kinds: Vec<ParamKind> = net.slots().iter().map(|s| s.kind).collect();
    let params = net.params_mut();
    if grads.len() != params.len() || state.buffers.len() != params.len() {
        return Err(Error::shape("gradient / buffer count does not match parameters"));
    }
    for (((p, g), v), kind) in params.into_iter().zip(grads).zip(&mut state.buffers).zip(kinds) {
        p.same_shape(g)?;
        let wd = if kind.decays() { cfg.weight_decay } else { 0.0 };
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = cfg.momentum * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    net.project();
    state.step += 1;
    state.lr = lr;
    Ok(())
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == y
        })
        .count()
}

/// Generator for everything random within epoch `epoch`; resuming from a
/// checkpoint at an epoch boundary replays the same stream.
pub fn epoch_rng(cfg: &TrainConfig, epoch: u64) -> Rng {
    Rng::new(cfg.seed).fork(epoch + 1)
}

/// One shuffled pass of minibatch SGD over `data`.
pub fn train_epoch(
    net: &mut Network,
    data: &dyn TrainData,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let epoch = state.epoch;
    let lr = lr_at(cfg, epoch);
    let mut rng = epoch_rng(cfg, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let (mut loss_sum, mut hits) = (0.0, 0);
    for idx in order.chunks(cfg.batch) {
        let (x, labels) = data.batch(idx, cfg.augment, &mut rng)?;
        let diverged = |what: String| {
            Error::Diverged(format!("{what} at epoch {epoch}, step {} (lr {lr})", state.step))
        };
        let (logits, tape) = match net.forward(&x, Mode::Train, &mut rng) {
            Err(Error::NonFinite(op)) => return Err(diverged(format!("non-finite {op}"))),
            r => r?,
        };
        let (loss, dlogits) = softmax_xent(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(diverged(format!("loss {loss}")));
        }
        let (grads, _) = net.backward(&tape, &dlogits)?;
        sgd_step(net, state, &grads, cfg, lr)?;
        loss_sum += loss * idx.len() as f64;
        hits += correct(&logits, &labels);
    }
    state.epoch += 1;
    state.lr = lr;
    let n = data.len() as f64;
    Ok(EpochMetrics {
        epoch,
        loss: loss_sum / n,
        accuracy: hits as f64 / n,
        lr,
    })
}

/// Evaluation-mode loss and accuracy in minibatches of `batch`.
pub fn evaluate(net: &Network, data: &dyn TrainData, batch: usize) -> Result<EvalMetrics> {
    if data.is_empty() || batch == 0 {
        return Err(Error::invalid("evaluation needs data and a positive batch size"));
    }
    let mut rng = Rng::new(0);
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut loss_sum, mut hits) = (0.0, 0);
    for idx in order.chunks(batch) {
        let (x, labels) = data.batch(idx, false, &mut rng)?;
        let logits = net.predict(&x)?;
        let (loss, _) = softmax_xent(&logits, &labels)?;
        loss_sum += loss * idx.len() as f64;
        hits += correct(&logits, &labels);
    }
    let n = data.len() as f64;
    Ok(EvalMetrics {
        loss: loss_sum / n,
        accuracy: hits as f64 / n,
    })
}

/// Arg-max class per row.
pub fn predict_labels(net: &Network, x: &Tensor) -> Result<Vec<usize>> {
    let logits = net.predict(x)?;
    let k = logits.shape()[1];
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b }))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_plainnet_with, PlainNetOptions};

    fn tiny_net(steps: Option<usize>, input_dropout: f64) -> Network {
        let spec = build_plainnet_with(
            3,
            3,
            steps,
            PlainNetOptions {
                width: 4,
                image: 8,
                input_dropout,
                ..PlainNetOptions::default()
            },
        )
        .unwrap();
        let mut net = Network::zeroed(&spec).unwrap();
        init_params(&mut net, &mut Rng::new(1));
        net
    }

    fn toy_data(n: usize, seed: u64) -> TensorData {
        let mut rng = Rng::new(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let mut images = rng.normal_tensor(&[n, 3, 8, 8], 0.0, 0.3);
        for (i, &y) in labels.iter().enumerate() {
            images.item_mut(i)[y * 64..(y + 1) * 64].iter_mut().for_each(|v| *v += 1.0);
        }
        TensorData::new(images, labels).unwrap()
    }

    fn cfg(lr0: f64) -> TrainConfig {
        TrainConfig {
            lr0,
            schedule: Schedule::constant(),
            momentum: 0.9,
            weight_decay: 5e-4,
            batch: 4,
            epochs: 1,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn init_respects_constraints_and_seed() {
        let a = tiny_net(Some(2), 0.2);
        let b = tiny_net(Some(2), 0.2);
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.data(), pb.data());
        }
        for (slot, p) in a.slots().iter().zip(a.params()) {
            match slot.kind {
                ParamKind::Wtilde => {
                    assert!(slot.pinned.iter().all(|&i| p.data()[i] == 0.0));
                    assert!(p.max_abs() <= 0.01);
                }
                ParamKind::Gain => assert!(p.data().iter().all(|&v| v == 0.9)),
                ParamKind::Threshold => assert!(p.data().iter().all(|&v| v == 0.01)),
                ParamKind::Bias => assert_eq!(p.max_abs(), 0.0),
                ParamKind::Weight => {}
            }
        }
    }

    #[test]
    fn weight_std_matches_fan_in() {
        // 3×3 kernels over 96 input channels: fan_in 864, ≈1.1e5 draws
        let spec = crate::network::NetworkSpec {
            name: "probe".into(),
            classes: 128,
            input: [96, 4, 4],
            layers: vec![
                crate::network::LayerSpec::Conv { filters: 128, kernel: 3, stride: 1 },
                crate::network::LayerSpec::Gap,
            ],
        };
        let mut net = Network::zeroed(&spec).unwrap();
        init_params(&mut net, &mut Rng::new(11));
        let w = net.params()[0];
        assert_eq!(w.len(), 128 * 864);
        let mean = w.sum() / w.len() as f64;
        let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let target = (2.0f64 / 864.0).sqrt();
        assert!((std / target - 1.0).abs() < 0.05, "{std} vs {target}");
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut net = tiny_net(Some(2), 0.2);
        let before: Vec<Tensor> = net.params().into_iter().cloned().collect();
        let mut state = OptimizerState::new(&net);
        let data = toy_data(10, 2);
        let c = TrainConfig { lr0: 1.0, ..cfg(1.0) };
        // lr0 must be positive, so zero the rate through the schedule
        let c = TrainConfig {
            schedule: Schedule::new(vec![(0, 0.0)]).unwrap(),
            ..c
        };
        train_epoch(&mut net, &data, &c, &mut state).unwrap();
        for (a, b) in before.iter().zip(net.params()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(state.step, 3);
    }

    #[test]
    fn hand_stepped_momentum_without_decay() {
        // two scalars: W and c of a 1→1 dense classifier; grads g1, g2 applied twice
        let spec = crate::network::NetworkSpec {
            name: "scalar".into(),
            classes: 1,
            input: [1, 1, 1],
            layers: vec![crate::network::LayerSpec::Gap, crate::network::LayerSpec::Classifier],
        };
        let mut net = Network::zeroed(&spec).unwrap();
        net.params_mut()[0].fill(1.0);
        net.params_mut()[1].fill(-0.5);
        let mut state = OptimizerState::new(&net);
        let c = TrainConfig {
            momentum: 0.5,
            weight_decay: 0.0,
            ..cfg(0.1)
        };
        let grads = vec![Tensor::full(&[1, 1], 2.0), Tensor::full(&[1], -4.0)];
        sgd_step(&mut net, &mut state, &grads, &c, 0.1).unwrap();
        sgd_step(&mut net, &mut state, &grads, &c, 0.1).unwrap();
        // v1 = g, v2 = 1.5 g; p = p0 − 0.1·2.5·g
        assert!((net.params()[0].data()[0] - (1.0 - 0.25 * 2.0)).abs() < 1e-15);
        assert!((net.params()[1].data()[0] - (-0.5 + 0.25 * 4.0)).abs() < 1e-15);

        // weight decay touches W but not c
        let mut net2 = Network::zeroed(&spec).unwrap();
        net2.params_mut()[0].fill(1.0);
        net2.params_mut()[1].fill(1.0);
        let mut s2 = OptimizerState::new(&net2);
        let zero = vec![Tensor::zeros(&[1, 1]), Tensor::zeros(&[1])];
        let c2 = TrainConfig { weight_decay: 0.1, ..c };
        sgd_step(&mut net2, &mut s2, &zero, &c2, 1.0).unwrap();
        assert!((net2.params()[0].data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(net2.params()[1].data()[0], 1.0);
    }

    #[test]
    fn constraints_hold_after_every_step() {
        let mut net = tiny_net(Some(3), 0.2);
        let mut state = OptimizerState::new(&net);
        let data = toy_data(12, 3);
        let c = TrainConfig { lr0: 0.5, batch: 2, ..cfg(0.5) };
        let mut rng = Rng::new(4);
        for _ in 0..6 {
            let idx: Vec<usize> = (0..2).map(|_| rng.below(12)).collect();
            let (x, y) = data.batch(&idx, false, &mut rng).unwrap();
            let (logits, tape) = net.forward(&x, Mode::Train, &mut rng).unwrap();
            let (_, dl) = softmax_xent(&logits, &y).unwrap();
            let (mut grads, _) = net.backward(&tape, &dl).unwrap();
            // push hard against every constraint on the metric parameters
            for ((g, slot), sign) in grads.iter_mut().zip(net.slots()).zip([1.0, -1.0].iter().cycle()) {
                *g = match slot.kind {
                    ParamKind::Gain => Tensor::full(&slot.shape, 10.0 * sign),
                    ParamKind::Threshold => Tensor::full(&slot.shape, 10.0),
                    ParamKind::Wtilde => rng.normal_tensor(&slot.shape, 0.0, 1.0),
                    _ => g.clone(),
                };
            }
            sgd_step(&mut net, &mut state, &grads, &c, 0.5).unwrap();
            for (slot, p) in net.slots().iter().zip(net.params()) {
                match slot.kind {
                    ParamKind::Wtilde => assert!(slot.pinned.iter().all(|&i| p.data()[i] == 0.0)),
                    ParamKind::Gain => assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v))),
                    ParamKind::Threshold => assert!(p.data().iter().all(|&v| v >= 0.0)),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn same_seed_same_curve() {
        let data = toy_data(16, 5);
        let run = || {
            let mut net = tiny_net(Some(2), 0.2);
            let mut state = OptimizerState::new(&net);
            let c = cfg(0.05);
            (0..3)
                .map(|_| train_epoch(&mut net, &data, &c, &mut state).unwrap().loss)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_reported() {
        let mut net = tiny_net(None, 0.0);
        net.params_mut()[0].fill(f64::INFINITY);
        let mut state = OptimizerState::new(&net);
        let err = train_epoch(&mut net, &toy_data(4, 1), &cfg(0.1), &mut state).unwrap_err();
        assert!(matches!(&err, Error::Diverged(m) if m.contains("epoch 0, step 0")), "{err}");
    }

    #[test]
    fn evaluate_counts_accuracy() {
        let net = tiny_net(Some(1), 0.2);
        let data = toy_data(9, 6);
        let m = evaluate(&net, &data, 4).unwrap();
        let x = data.images.clone();
        let pred = predict_labels(&net, &x).unwrap();
        let hits = pred.iter().zip(&data.labels).filter(|(a, b)| a == b).count();
        assert_eq!(m.accuracy, hits as f64 / 9.0);
        assert!(m.loss.is_finite());
    }
}
