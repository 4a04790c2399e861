use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

use super::Mode;

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v.is_nan() { v } else { v.max(0.0) })
}

/// Subgradient 0 at the kink.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.zip_map(dy, |xv, g| if xv > 0.0 { g } else { 0.0 })
}

/// Per-entry multiplier applied in the forward pass: `0` or `1/(1 − rate)`.
#[derive(Clone, Debug)]
pub enum DropoutMask {
    Identity,
    Scale(Vec<f64>),
}

/// Inverted dropout. Identity when `rate == 0` or in evaluation mode.
pub fn dropout_forward(x: &Tensor, rate: f64, rng: &mut Rng, mode: Mode) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 || mode == Mode::Eval {
        return Ok((x.clone(), DropoutMask::Identity));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
        .collect();
    let mut y = x.clone();
    y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
    Ok((y, DropoutMask::Scale(mask)))
}

pub fn dropout_backward(mask: &DropoutMask, dy: &Tensor) -> Result<Tensor> {
    match mask {
        DropoutMask::Identity => Ok(dy.clone()),
        DropoutMask::Scale(m) => {
            if m.len() != dy.len() {
                return Err(Error::shape("dropout mask does not match upstream"));
            }
            let mut g = dy.clone();
            g.data_mut().iter_mut().zip(m).for_each(|(v, s)| *v *= s);
            Ok(g)
        }
    }
}

/// `N × C × H × W → N × C` spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let area = (h * w) as f64;
    let data = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().sum::<f64>() / area)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::shape("pooling input must be rank 4"));
    };
    if dy.shape() != [n, c] {
        return Err(Error::shape("upstream does not match pooled shape"));
    }
    let area = (h * w) as f64;
    let mut g = Tensor::zeros(input_shape);
    for (plane, &d) in g.data_mut().chunks_mut(h * w).zip(dy.data()) {
        plane.fill(d / area);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_identities() {
        let mut rng = Rng::new(1);
        let x = rng.normal_tensor(&[10, 10], 0.0, 1.0);
        assert_eq!(dropout_forward(&x, 0.0, &mut rng, Mode::Train).unwrap().0, x);
        assert_eq!(dropout_forward(&x, 0.9, &mut rng, Mode::Eval).unwrap().0, x);
        assert!(dropout_forward(&x, 1.0, &mut rng, Mode::Train).is_err());
    }

    #[test]
    fn dropout_keep_fraction() {
        let mut rng = Rng::new(2);
        let x = Tensor::full(&[1_000_000], 1.0);
        let (y, mask) = dropout_forward(&x, 0.5, &mut rng, Mode::Train).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        assert!((kept - 0.5).abs() <= 0.005, "{kept}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let g = dropout_backward(&mask, &x).unwrap();
        assert_eq!(g, y);
    }

    #[test]
    fn pooling_cases() {
        let x = Tensor::full(&[2, 3, 4, 5], 1.25);
        assert!(global_avg_pool(&x).unwrap().data().iter().all(|&v| v == 1.25));
        let mut rng = Rng::new(3);
        let x = rng.normal_tensor(&[2, 3, 1, 1], 0.0, 1.0);
        assert_eq!(global_avg_pool(&x).unwrap().data(), x.data());
        let x = rng.normal_tensor(&[2, 3, 4, 4], 0.0, 1.0);
        let p = global_avg_pool(&x).unwrap();
        for (i, plane) in x.data().chunks(16).enumerate() {
            let direct: f64 = plane.iter().sum::<f64>() / 16.0;
            assert!((p.data()[i] - direct).abs() <= 1e-12);
        }
    }

    #[test]
    fn relu_kink_gradient_zero() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }
}
