//! Q-metric ReLU: `T` unrolled steps of
//!
//! `U_{t+1} = ReLU(h ⊙ Z + W̃(U_t − Z) − b)`, `U₀ = 0`.
//!
//! In dense form `W̃` is a `k × k` matrix with zero diagonal acting on `N × k`
//! inputs. In convolutional form `W̃` is a same-padded, stride-1 (optionally
//! grouped) convolution whose self-channel center taps are pinned to zero, and
//! `h`, `b` are per-channel.

use crate::error::{Error, Result};
use crate::tensor::{conv2d_grouped, conv2d_grouped_grads, gemm, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QReluForm {
    Dense,
    Conv { groups: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct QReluLayer {
    /// Dense: `k × k`. Conv: `C × C/groups × kh × kw` with odd `kh`, `kw`.
    pub wtilde: Tensor,
    pub h: Tensor,
    pub b: Tensor,
    pub steps: usize,
    pub form: QReluForm,
}

#[derive(Clone, Debug)]
pub struct QReluTape {
    z: Tensor,
    /// `U_t − Z` for `t = 0..T`
    diffs: Vec<Tensor>,
    /// Pre-activations `A_t` for `t = 0..T`
    pre: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct QReluGrads {
    pub z: Tensor,
    pub wtilde: Tensor,
    pub h: Tensor,
    pub b: Tensor,
}

impl QReluLayer {
    pub fn dense(wtilde: Tensor, h: Tensor, b: Tensor, steps: usize) -> Result<Self> {
        let (k, k2) = wtilde.dims2()?;
        if k != k2 {
            return Err(Error::shape("dense W̃ must be square"));
        }
        let layer = QReluLayer {
            wtilde,
            h,
            b,
            steps,
            form: QReluForm::Dense,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn conv(wtilde: Tensor, h: Tensor, b: Tensor, steps: usize, groups: usize) -> Result<Self> {
        let (c, cg, kh, kw) = wtilde.dims4()?;
        if groups == 0 || c % groups != 0 || cg * groups != c {
            return Err(Error::shape(format!(
                "conv W̃ {:?} incompatible with {groups} groups",
                wtilde.shape()
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv W̃ kernels must have odd extents"));
        }
        let layer = QReluLayer {
            wtilde,
            h,
            b,
            steps,
            form: QReluForm::Conv { groups },
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Channel (dense: unit) count.
    pub fn channels(&self) -> usize {
        self.wtilde.shape()[0]
    }

    /// Flat indices of `W̃` entries constrained to zero: the diagonal (dense) or
    /// every self-channel center tap (conv).
    pub fn pinned_indices(&self) -> Vec<usize> {
        pinned_indices(self.wtilde.shape(), self.form)
    }

    /// Checks shapes plus the constraint set `diag(W̃) = 0`, `h ∈ [0,1]`, `b ≥ 0`.
    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.h.shape() != [c] || self.b.shape() != [c] {
            return Err(Error::shape(format!("h and b need {c} entries")));
        }
        if self.steps == 0 {
            return Err(Error::invalid("unroll count must be positive"));
        }
        if self.pinned_indices().iter().any(|&i| self.wtilde.data()[i] != 0.0) {
            return Err(Error::invalid("W̃ pinned entries must be zero"));
        }
        if self.h.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("h must lie in [0, 1]"));
        }
        if self.b.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("b must be non-negative"));
        }
        Ok(())
    }

    fn check_input(&self, z: &Tensor) -> Result<()> {
        let ok = match self.form {
            QReluForm::Dense => z.rank() == 2 && z.shape()[1] == self.channels(),
            QReluForm::Conv { .. } => z.rank() == 4 && z.shape()[1] == self.channels(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "Q-ReLU with {} channels got input {:?}",
                self.channels(),
                z.shape()
            )))
        }
    }

    fn geometry(&self, groups: usize) -> ConvGeometry {
        ConvGeometry {
            stride: 1,
            padding: self.wtilde.shape()[2] / 2,
            groups,
        }
    }

    /// `W̃ D` for `D` shaped like the input.
    fn apply_w(&self, d: &Tensor) -> Result<Tensor> {
        match self.form {
            QReluForm::Dense => {
                let (n, k) = d.dims2()?;
                let mut out = Tensor::zeros(&[n, k]);
                gemm(n, k, k, 1.0, d.data(), false, self.wtilde.data(), true, 0.0, out.data_mut());
                Ok(out)
            }
            QReluForm::Conv { groups } => conv2d_grouped(d, &self.wtilde, self.geometry(groups)),
        }
    }

    /// Per-entry channel index lookup stride: `(channels, spatial)`.
    fn layout(&self, z: &Tensor) -> (usize, usize) {
        match self.form {
            QReluForm::Dense => (self.channels(), 1),
            QReluForm::Conv { .. } => (self.channels(), z.shape()[2] * z.shape()[3]),
        }
    }

    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, QReluTape)> {
        self.check_input(z)?;
        let (c, sp) = self.layout(z);
        let (h, b) = (self.h.data(), self.b.data());
        let mut u = Tensor::zeros(z.shape());
        let mut diffs = Vec::with_capacity(self.steps);
        let mut pre = Vec::with_capacity(self.steps);
        for _ in 0..self.steps {
            let d = u.zip_map(z, |a, b| a - b)?;
            let mut a = self.apply_w(&d)?;
            for (i, (av, zv)) in a.data_mut().iter_mut().zip(z.data()).enumerate() {
                let ch = (i / sp) % c;
                *av += h[ch] * zv - b[ch];
            }
            u = a.map(|v| if v.is_nan() { v } else { v.max(0.0) });
            diffs.push(d);
            pre.push(a);
        }
        u.check_finite("q-relu forward")?;
        Ok((
            u,
            QReluTape {
                z: z.clone(),
                diffs,
                pre,
            },
        ))
    }

    /// Exact gradients of the `T`-step map; the ReLU derivative at 0 is 0.
    pub fn backward(&self, tape: &QReluTape, upstream: &Tensor) -> Result<QReluGrads> {
        if tape.pre.len() != self.steps || upstream.shape() != tape.z.shape() {
            return Err(Error::shape("tape does not match this layer or upstream"));
        }
        let (c, sp) = self.layout(&tape.z);
        let h = self.h.data();
        let mut g = upstream.clone();
        let mut gz = Tensor::zeros(tape.z.shape());
        let mut gw = Tensor::zeros(self.wtilde.shape());
        let mut gh = Tensor::zeros(&[c]);
        let mut gb = Tensor::zeros(&[c]);
        for t in (0..self.steps).rev() {
            let ga = g.zip_map(&tape.pre[t], |gv, a| if a > 0.0 { gv } else { 0.0 })?;
            for (i, (&gav, &zv)) in ga.data().iter().zip(tape.z.data()).enumerate() {
                let ch = (i / sp) % c;
                gh.data_mut()[ch] += gav * zv;
                gb.data_mut()[ch] -= gav;
                gz.data_mut()[i] += h[ch] * gav;
            }
            // ∂/∂D of W̃D, with D = U_t − Z
            let gd = match self.form {
                QReluForm::Dense => {
                    let (n, k) = ga.dims2()?;
                    let mut gd = Tensor::zeros(&[n, k]);
                    gemm(n, k, k, 1.0, ga.data(), false, self.wtilde.data(), false, 0.0, gd.data_mut());
                    gemm(k, n, k, 1.0, ga.data(), true, tape.diffs[t].data(), false, 1.0, gw.data_mut());
                    gd
                }
                QReluForm::Conv { groups } => {
                    let (gd, gwt) =
                        conv2d_grouped_grads(&ga, &tape.diffs[t], &self.wtilde, self.geometry(groups))?;
                    gw.add_assign(&gwt)?;
                    gd
                }
            };
            gz.axpy(-1.0, &gd)?;
            // U₀ = 0 is constant, so the chain stops at t = 0.
            g = gd;
        }
        Ok(QReluGrads {
            z: gz,
            wtilde: gw,
            h: gh,
            b: gb,
        })
    }
}

pub(crate) fn pinned_indices(shape: &[usize], form: QReluForm) -> Vec<usize> {
    match form {
        QReluForm::Dense => {
            let k = shape[0];
            (0..k).map(|i| i * k + i).collect()
        }
        QReluForm::Conv { groups } => {
            let (c, cg, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
            let per_group = c / groups;
            (0..c)
                .map(|o| {
                    let within = o % per_group;
                    debug_assert!(within < cg);
                    ((o * cg + within) * kh + kh / 2) * kw + kw / 2
                })
                .collect()
        }
    }
}
