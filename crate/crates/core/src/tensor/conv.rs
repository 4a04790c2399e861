//! 2-D convolution in the cross-correlation convention (kernels are not flipped):
//!
//! `y[n,o,i,j] = Σ_{c,a,b} k[o,c,a,b] · x[n, g·Cin_g + c, i·s + a − p, j·s + b − p]`
//!
//! where `g` is the group of output channel `o`. Implemented with im2col + GEMM,
//! parallel over the batch axis.

use super::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            groups: 1,
        }
    }
}

/// `floor((extent + 2·padding − kernel) / stride) + 1`, or `None` on underflow.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct Plan {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
    g: ConvGeometry,
}

impl Plan {
    fn new(input: &Tensor, kernels: &Tensor, g: ConvGeometry) -> Result<Plan> {
        let (n, cin, h, w) = input.dims4()?;
        let (cout, cin_g, kh, kw) = kernels.dims4()?;
        if g.groups == 0 || cin % g.groups != 0 || cout % g.groups != 0 {
            return Err(Error::shape(format!(
                "groups {} must divide channels {cin} and {cout}",
                g.groups
            )));
        }
        if cin_g * g.groups != cin {
            return Err(Error::shape(format!(
                "kernel expects {} input channels per group, input has {cin} over {} groups",
                cin_g, g.groups
            )));
        }
        let ho = conv_out_extent(h, kh, g.stride, g.padding);
        let wo = conv_out_extent(w, kw, g.stride, g.padding);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} (stride {}, pad {}) does not fit {h}x{w}",
                g.stride, g.padding
            )));
        };
        Ok(Plan {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            cin_g,
            cout_g: cout / g.groups,
            g,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds channels `[c0, c0 + cin_g)` of one sample into `col`.
    fn im2col(&self, x: &[f64], c0: usize, col: &mut [f64]) {
        let (s, p) = (self.g.stride as isize, self.g.padding as isize);
        let cols = self.col_cols();
        for c in 0..self.cin_g {
            let plane = &x[(c0 + c) * self.h * self.w..(c0 + c + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (c * self.kh + a) * self.kw + b;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for i in 0..self.ho {
                        let y = i as isize * s + a as isize - p;
                        let out = &mut dst[i * self.wo..(i + 1) * self.wo];
                        if y < 0 || y >= self.h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for (j, o) in out.iter_mut().enumerate() {
                            let xx = j as isize * s + b as isize - p;
                            *o = if xx < 0 || xx >= self.w as isize {
                                0.0
                            } else {
                                src[xx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Plan::im2col`]: accumulates `col` into channels starting at `c0`.
    fn col2im(&self, col: &[f64], c0: usize, x: &mut [f64]) {
        let (s, p) = (self.g.stride as isize, self.g.padding as isize);
        let cols = self.col_cols();
        for c in 0..self.cin_g {
            let plane = &mut x[(c0 + c) * self.h * self.w..(c0 + c + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (c * self.kh + a) * self.kw + b;
                    let src = &col[row * cols..(row + 1) * cols];
                    for i in 0..self.ho {
                        let y = i as isize * s + a as isize - p;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for j in 0..self.wo {
                            let xx = j as isize * s + b as isize - p;
                            if xx >= 0 && xx < self.w as isize {
                                dst[xx as usize] += src[i * self.wo + j];
                            }
                        }
                    }
                }
            }
        }
    }

    fn kernel_group<'a>(&self, kernels: &'a [f64], grp: usize) -> &'a [f64] {
        let len = self.cout_g * self.col_rows();
        &kernels[grp * len..(grp + 1) * len]
    }
}

/// Convolution with a single group. See the module docs for the convention.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_grouped(input, kernels, ConvGeometry::new(stride, padding))
}

pub fn conv2d_grads(
    upstream: &Tensor,
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    conv2d_grouped_grads(upstream, input, kernels, ConvGeometry::new(stride, padding))
}

/// Grouped convolution; kernels are `Cout × (Cin / groups) × kh × kw`.
pub fn conv2d_grouped(input: &Tensor, kernels: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let plan = Plan::new(input, kernels, geom)?;
    let mut out = Tensor::zeros(&[plan.n, plan.cout, plan.ho, plan.wo]);
    let out_item = plan.cout * plan.col_cols();
    let (rows, cols) = (plan.col_rows(), plan.col_cols());
    par::for_each_chunk_mut(out.data_mut(), out_item, |n, y| {
        let x = input.item(n);
        let mut col = vec![0.0; rows * cols];
        for grp in 0..geom.groups {
            plan.im2col(x, grp * plan.cin_g, &mut col);
            let yg = &mut y[grp * plan.cout_g * cols..(grp + 1) * plan.cout_g * cols];
            gemm(
                plan.cout_g,
                rows,
                cols,
                1.0,
                plan.kernel_group(kernels.data(), grp),
                false,
                &col,
                false,
                0.0,
                yg,
            );
        }
    });
    Ok(out)
}

/// Gradients of `Σ upstream ⊙ conv2d(input, kernels)` with respect to input and kernels.
///
/// Kernel gradients are accumulated over fixed batch chunks and summed in chunk
/// order, so the result does not depend on the thread count.
pub fn conv2d_grouped_grads(
    upstream: &Tensor,
    input: &Tensor,
    kernels: &Tensor,
    geom: ConvGeometry,
) -> Result<(Tensor, Tensor)> {
    let plan = Plan::new(input, kernels, geom)?;
    let expect = [plan.n, plan.cout, plan.ho, plan.wo];
    if upstream.shape() != expect {
        return Err(Error::shape(format!(
            "upstream {:?} does not match conv output {expect:?}",
            upstream.shape()
        )));
    }
    let (rows, cols) = (plan.col_rows(), plan.col_cols());
    let klen = kernels.len();

    let mut grad_input = Tensor::zeros(input.shape());
    let in_item = plan.cin * plan.h * plan.w;
    par::for_each_chunk_mut(grad_input.data_mut(), in_item, |n, gx| {
        let dy = upstream.item(n);
        let mut col = vec![0.0; rows * cols];
        for grp in 0..geom.groups {
            let dyg = &dy[grp * plan.cout_g * cols..(grp + 1) * plan.cout_g * cols];
            gemm(
                rows,
                plan.cout_g,
                cols,
                1.0,
                plan.kernel_group(kernels.data(), grp),
                true,
                dyg,
                false,
                0.0,
                &mut col,
            );
            plan.col2im(&col, grp * plan.cin_g, gx);
        }
    });

    let partials = par::map_chunks(plan.n, |range| {
        let mut gk = vec![0.0; klen];
        let mut col = vec![0.0; rows * cols];
        let glen = plan.cout_g * rows;
        for n in range {
            let x = input.item(n);
            let dy = upstream.item(n);
            for grp in 0..geom.groups {
                plan.im2col(x, grp * plan.cin_g, &mut col);
                let dyg = &dy[grp * plan.cout_g * cols..(grp + 1) * plan.cout_g * cols];
                gemm(
                    plan.cout_g,
                    cols,
                    rows,
                    1.0,
                    dyg,
                    false,
                    &col,
                    true,
                    1.0,
                    &mut gk[grp * glen..(grp + 1) * glen],
                );
            }
        }
        gk
    });
    let mut grad_kernels = Tensor::zeros(kernels.shape());
    for p in partials {
        grad_kernels
            .data_mut()
            .iter_mut()
            .zip(&p)
            .for_each(|(a, b)| *a += b);
    }
    Ok((grad_input, grad_kernels))
}
