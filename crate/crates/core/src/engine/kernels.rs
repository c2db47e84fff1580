//! Raw numeric kernels over row-major `f64` slices. Shape checking happens
//! in the tape; these functions trust their geometry.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
        depthwise: bool,
    ) -> Result<Self> {
        let op = if depthwise {
            "depthwise_conv2d"
        } else {
            "conv2d"
        };
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::shape(op, "input and weight must be rank 4"));
        }
        if stride == 0 {
            return Err(Error::shape(op, "stride must be positive"));
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if depthwise {
            if wc != 1 || cout != cin {
                return Err(Error::shape(
                    op,
                    format!("weight {weight:?} incompatible with {cin} channels"),
                ));
            }
        } else if wc != cin {
            return Err(Error::shape(
                op,
                format!("weight expects {wc} channels, input has {cin}"),
            ));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape(op, "kernel larger than padded input"));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.oh, self.ow]
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    #[inline]
    fn src(&self, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0).then_some(pos as usize)
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    match g.src(oy, ki).filter(|&iy| iy < g.h) {
                        None => dst.iter_mut().for_each(|v| *v = 0.0),
                        Some(iy) => {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match g.src(ox, kj).filter(|&ix| ix < g.w) {
                                    Some(ix) => plane[iy * g.w + ix],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ki).filter(|&iy| iy < g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src(ox, kj).filter(|&ix| ix < g.w) {
                            plane[iy * g.w + ix] += cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// c[m x n] = beta * c + a[m x k] * b[k x n], with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides address within the slices given the asserted extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![0.0; g.n * g.cout * p];
    let mut cols = vec![0.0; k * p];
    let in_stride = g.cin * g.h * g.w;
    for s in 0..g.n {
        im2col(g, &x[s * in_stride..(s + 1) * in_stride], &mut cols);
        let dst = &mut out[s * g.cout * p..(s + 1) * g.cout * p];
        gemm(
            g.cout,
            k,
            p,
            w,
            (k as isize, 1),
            &cols,
            (p as isize, 1),
            0.0,
            dst,
        );
    }
    out
}

/// Accumulates input and weight gradients of a convolution.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let (k, p) = (g.k(), g.p());
    let in_stride = g.cin * g.h * g.w;
    let mut cols = vec![0.0; k * p];
    for s in 0..g.n {
        let dys = &dy[s * g.cout * p..(s + 1) * g.cout * p];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, &x[s * in_stride..(s + 1) * in_stride], &mut cols);
            // dw[cout x k] += dy[cout x p] * cols^T[p x k]
            gemm(
                g.cout,
                p,
                k,
                dys,
                (p as isize, 1),
                &cols,
                (1, p as isize),
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            // cols[k x p] = w^T[k x cout] * dy[cout x p]
            gemm(
                k,
                g.cout,
                p,
                w,
                (1, k as isize),
                dys,
                (p as isize, 1),
                0.0,
                &mut cols,
            );
            col2im_add(g, &cols, &mut dx[s * in_stride..(s + 1) * in_stride]);
        }
    }
}

pub fn depthwise_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.cin * g.p()];
    for s in 0..g.n {
        for c in 0..g.cin {
            let plane = &x[(s * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let ker = &w[c * g.kh * g.kw..][..g.kh * g.kw];
            let dst = &mut out[(s * g.cin + c) * g.p()..][..g.p()];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for ki in 0..g.kh {
                        let Some(iy) = g.src(oy, ki).filter(|&iy| iy < g.h) else {
                            continue;
                        };
                        for kj in 0..g.kw {
                            if let Some(ix) = g.src(ox, kj).filter(|&ix| ix < g.w) {
                                acc += plane[iy * g.w + ix] * ker[ki * g.kw + kj];
                            }
                        }
                    }
                    dst[oy * g.ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn depthwise_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    for s in 0..g.n {
        for c in 0..g.cin {
            let base = (s * g.cin + c) * g.h * g.w;
            let ker = &w[c * g.kh * g.kw..][..g.kh * g.kw];
            let grad = &dy[(s * g.cin + c) * g.p()..][..g.p()];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let d = grad[oy * g.ow + ox];
                    if d == 0.0 {
                        continue;
                    }
                    for ki in 0..g.kh {
                        let Some(iy) = g.src(oy, ki).filter(|&iy| iy < g.h) else {
                            continue;
                        };
                        for kj in 0..g.kw {
                            if let Some(ix) = g.src(ox, kj).filter(|&ix| ix < g.w) {
                                let xi = base + iy * g.w + ix;
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[c * g.kh * g.kw + ki * g.kw + kj] += d * x[xi];
                                }
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] += d * ker[ki * g.kw + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 max pooling with stride 2 (floor). Returns output and argmax indices
/// into the input buffer.
pub fn maxpool2_forward(shape: &[usize], x: &[f64]) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (vec![n, c, oh, ow], out, arg)
}

/// Naive `[m x k] * [k x n]` product, used where operand sizes are tiny.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), 0.0, &mut c);
    c
}

/// `a * a^T` for row-major `a` of shape `[m x k]`.
pub fn gram_rows(a: &[f64], m: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * m];
    gemm(m, k, m, a, (k as isize, 1), a, (1, k as isize), 0.0, &mut c);
    c
}

/// `a^T * a` for row-major `a` of shape `[m x k]`.
pub fn gram_cols(a: &[f64], m: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * k];
    gemm(k, m, k, a, (1, k as isize), a, (k as isize, 1), 0.0, &mut c);
    c
}
