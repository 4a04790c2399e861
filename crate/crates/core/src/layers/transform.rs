use crate::error::{Error, Result};
use crate::tensor::{conv2d_grouped, conv2d_grouped_grads, gemm, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformForm {
    /// `weight` is `K_out × K_in`; inputs are `N × K_in`.
    Dense,
    /// `weight` is `C_out × C_in × kh × kw`; inputs are `N × C_in × H × W`.
    Conv { stride: usize, padding: usize },
}

/// Affine layer `z ↦ Wz − c`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformLayer {
    pub weight: Tensor,
    /// One entry per output unit (dense) or output channel (conv).
    pub bias: Tensor,
    pub form: TransformForm,
}

#[derive(Clone, Debug)]
pub struct TransformGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl TransformLayer {
    pub fn dense(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if bias.shape() != [out] {
            return Err(Error::shape(format!("bias {:?} for {out} outputs", bias.shape())));
        }
        Ok(TransformLayer {
            weight,
            bias,
            form: TransformForm::Dense,
        })
    }

    pub fn conv(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (out, _, _, _) = weight.dims4()?;
        if bias.shape() != [out] {
            return Err(Error::shape(format!("bias {:?} for {out} channels", bias.shape())));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        Ok(TransformLayer {
            weight,
            bias,
            form: TransformForm::Conv { stride, padding },
        })
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self.form {
            TransformForm::Dense => {
                let (n, kin) = x.dims2()?;
                let (kout, wk) = self.weight.dims2()?;
                if kin != wk {
                    return Err(Error::shape(format!("input width {kin}, weight expects {wk}")));
                }
                let mut y = Tensor::zeros(&[n, kout]);
                gemm(n, kin, kout, 1.0, x.data(), false, self.weight.data(), true, 0.0, y.data_mut());
                for row in y.data_mut().chunks_mut(kout) {
                    row.iter_mut().zip(self.bias.data()).for_each(|(v, c)| *v -= c);
                }
                Ok(y)
            }
            TransformForm::Conv { stride, padding } => {
                let mut y = conv2d_grouped(x, &self.weight, ConvGeometry::new(stride, padding))?;
                let (_, c, h, w) = y.dims4()?;
                for (i, plane) in y.data_mut().chunks_mut(h * w).enumerate() {
                    let b = self.bias.data()[i % c];
                    plane.iter_mut().for_each(|v| *v -= b);
                }
                Ok(y)
            }
        }
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> Result<TransformGrads> {
        match self.form {
            TransformForm::Dense => {
                let (n, kin) = x.dims2()?;
                let kout = self.outputs();
                if dy.shape() != [n, kout] {
                    return Err(Error::shape("upstream does not match dense output"));
                }
                let mut gx = Tensor::zeros(&[n, kin]);
                gemm(n, kout, kin, 1.0, dy.data(), false, self.weight.data(), false, 0.0, gx.data_mut());
                let mut gw = Tensor::zeros(self.weight.shape());
                gemm(kout, n, kin, 1.0, dy.data(), true, x.data(), false, 0.0, gw.data_mut());
                let mut gb = Tensor::zeros(&[kout]);
                for row in dy.data().chunks(kout) {
                    gb.data_mut().iter_mut().zip(row).for_each(|(g, d)| *g -= d);
                }
                Ok(TransformGrads {
                    input: gx,
                    weight: gw,
                    bias: gb,
                })
            }
            TransformForm::Conv { stride, padding } => {
                let (gx, gw) =
                    conv2d_grouped_grads(dy, x, &self.weight, ConvGeometry::new(stride, padding))?;
                let (_, c, h, w) = dy.dims4()?;
                let mut gb = Tensor::zeros(&[c]);
                for (i, plane) in dy.data().chunks(h * w).enumerate() {
                    gb.data_mut()[i % c] -= plane.iter().sum::<f64>();
                }
                Ok(TransformGrads {
                    input: gx,
                    weight: gw,
                    bias: gb,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{RealMatrix, Rng};

    #[test]
    fn identity_and_constant() {
        let eye = Tensor::from_matrix(&RealMatrix::identity(3, 3));
        let layer = TransformLayer::dense(eye, Tensor::zeros(&[3])).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), x);

        let layer = TransformLayer::dense(Tensor::zeros(&[2, 3]), Tensor::full(&[2], 1.0)).unwrap();
        assert!(layer.forward(&x).unwrap().data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn dense_matches_matmul_minus_bias() {
        let mut rng = Rng::new(1);
        let w = rng.normal_tensor(&[4, 5], 0.0, 1.0);
        let c = rng.normal_tensor(&[4], 0.0, 1.0);
        let x = rng.normal_tensor(&[3, 5], 0.0, 1.0);
        let layer = TransformLayer::dense(w.clone(), c.clone()).unwrap();
        let y = layer.forward(&x).unwrap();
        let expect = x.to_matrix().unwrap() * w.to_matrix().unwrap().transpose();
        for n in 0..3 {
            for o in 0..4 {
                let e = expect[(n, o)] - c.data()[o];
                assert!((y.data()[n * 4 + o] - e).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn conv_subtracts_per_channel_bias() {
        let k = Tensor::full(&[2, 1, 1, 1], 1.0);
        let layer = TransformLayer::conv(k, Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(), 1, 0).unwrap();
        let y = layer.forward(&Tensor::full(&[1, 1, 2, 2], 3.0)).unwrap();
        assert_eq!(y.data(), &[2., 2., 2., 2., 5., 5., 5., 5.]);
    }

    #[test]
    fn shape_errors() {
        let layer = TransformLayer::dense(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2])).unwrap();
        assert!(layer.forward(&Tensor::zeros(&[1, 4])).is_err());
        assert!(TransformLayer::dense(Tensor::zeros(&[2, 3]), Tensor::zeros(&[3])).is_err());
    }
}
