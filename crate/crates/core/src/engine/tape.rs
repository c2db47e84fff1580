use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    Depthwise {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
        batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    },
    Relu {
        x: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: usize,
    },
    Dense {
        x: usize,
        w: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Sum {
        x: usize,
    },
    SoftmaxCe {
        logits: usize,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Gather {
        x: usize,
        channels: Vec<usize>,
    },
    Scatter {
        x: usize,
        channels: Vec<usize>,
    },
    MaskChannels {
        x: usize,
        mask: Vec<f64>,
    },
    GramPenalty {
        w: usize,
        sign: Vec<f64>,
        fat: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation and replays it backwards once.
///
/// Every operation checks its output for NaN/Inf. After [`Tape::backward`]
/// the tape is consumed: further recording or a second backward pass is an
/// error.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let inner: usize = shape[2..].iter().product();
    (shape[0], shape[1], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape("variable belongs to a different tape"));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(Error::Tape("tape already consumed by backward"));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Records a leaf; gradients are tracked when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let needs = t.requires_grad();
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        self.push(value, Op::Leaf, needs, "leaf")
    }

    /// Records a leaf that participates in differentiation.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        self.push(value, Op::Leaf, true, "leaf")
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let t = Tensor::new(t.shape().to_vec(), t.into_data())?;
        self.push(t, Op::Leaf, false, "leaf")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v).expect("variable from this tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let geom = ConvGeom::new(
            self.nodes[xi].value.shape(),
            self.nodes[wi].value.shape(),
            stride,
            pad,
            false,
        )?;
        let out = kernels::conv2d_forward(
            &geom,
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
        );
        let needs = self.needs(xi) || self.needs(wi);
        self.push(
            Tensor::new(geom.out_shape(), out)?,
            Op::Conv2d { x: xi, w: wi, geom },
            needs,
            "conv2d",
        )
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let geom = ConvGeom::new(
            self.nodes[xi].value.shape(),
            self.nodes[wi].value.shape(),
            stride,
            pad,
            true,
        )?;
        let out = kernels::depthwise_forward(
            &geom,
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
        );
        let needs = self.needs(xi) || self.needs(wi);
        self.push(
            Tensor::new(geom.out_shape(), out)?,
            Op::Depthwise { x: xi, w: wi, geom },
            needs,
            "depthwise_conv2d",
        )
    }

    /// Per-channel normalization over every axis except 1.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let shape = self.nodes[xi].value.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batchnorm", "input must have a channel axis"));
        }
        let (n, c, inner) = channel_layout(&shape);
        let gam = self.nodes[gi].value.data();
        let bet = self.nodes[bi].value.data();
        if gam.len() != c || bet.len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("{c} channels but affine of {}", gam.len()),
            ));
        }
        let m = n * inner;
        let xd = self.nodes[xi].value.data();
        let (mean, var, train, batch_stats) = match mode {
            BnMode::Train => {
                if m == 0 {
                    return Err(Error::EmptyBatch);
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let sl = &xd[(s * c + ch) * inner..][..inner];
                        mean[ch] += sl.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for s in 0..n {
                    for ch in 0..c {
                        let sl = &xd[(s * c + ch) * inner..][..inner];
                        var[ch] += sl.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                let unbiased: Vec<f64> = var
                    .iter()
                    .map(|v| if m > 1 { v / (m - 1) as f64 } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|v| *v /= m as f64);
                (mean.clone(), var, true, Some((mean, unbiased)))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm", "running statistics extent"));
                }
                (mean.to_vec(), var.to_vec(), false, None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut x_hat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * inner;
                for k in off..off + inner {
                    let h = (xd[k] - mean[ch]) * inv_std[ch];
                    x_hat[k] = h;
                    out[k] = gam[ch] * h + bet[ch];
                }
            }
        }
        let needs = self.needs(xi) || self.needs(gi) || self.needs(bi);
        self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                x_hat,
                inv_std,
                train,
                batch_stats,
            },
            needs,
            "batchnorm",
        )
    }

    /// Batch mean and unbiased variance recorded by a train-mode batchnorm.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[self.idx(v).ok()?].op {
            Op::BatchNorm {
                batch_stats: Some((m, s)),
                ..
            } => Some((m, s)),
            _ => None,
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a.max(0.0)).collect(),
        )?;
        let needs = self.needs(xi);
        self.push(out, Op::Relu { x: xi }, needs, "relu")
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = self.nodes[xi].value.shape();
        if shape.len() != 4 || shape[2] < 2 || shape[3] < 2 {
            return Err(Error::shape(
                "max_pool2",
                format!("needs [N,C,H>=2,W>=2], got {shape:?}"),
            ));
        }
        let (s, out, argmax) = kernels::maxpool2_forward(shape, self.nodes[xi].value.data());
        let needs = self.needs(xi);
        self.push(
            Tensor::new(s, out)?,
            Op::MaxPool { x: xi, argmax },
            needs,
            "max_pool2",
        )
    }

    /// `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = self.nodes[xi].value.shape();
        if shape.len() < 3 {
            return Err(Error::shape("global_avg_pool", "needs spatial axes"));
        }
        let (n, c, inner) = channel_layout(shape);
        let xd = self.nodes[xi].value.data();
        let out: Vec<f64> = (0..n * c)
            .map(|p| xd[p * inner..(p + 1) * inner].iter().sum::<f64>() / inner as f64)
            .collect();
        let needs = self.needs(xi);
        self.push(
            Tensor::new(vec![n, c], out)?,
            Op::GlobalAvgPool { x: xi },
            needs,
            "global_avg_pool",
        )
    }

    /// `x[N, K] * w[M, K]^T -> [N, M]`.
    pub fn dense(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let (xs, ws) = (self.nodes[xi].value.shape(), self.nodes[wi].value.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("dense", format!("{xs:?} x {ws:?}^T")));
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let wt = transpose(self.nodes[wi].value.data(), m, k);
        let out = kernels::matmul(self.nodes[xi].value.data(), &wt, n, k, m);
        let needs = self.needs(xi) || self.needs(wi);
        self.push(
            Tensor::new(vec![n, m], out)?,
            Op::Dense { x: xi, w: wi },
            needs,
            "dense",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        let needs = self.needs(ai) || self.needs(bi);
        self.push(out, Op::Add { a: ai, b: bi }, needs, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = Tensor::new(
            av.shape().to_vec(),
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        let needs = self.needs(ai) || self.needs(bi);
        self.push(out, Op::Mul { a: ai, b: bi }, needs, "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|a| a * factor).collect(),
        )?;
        let needs = self.needs(xi);
        self.push(out, Op::Scale { x: xi, factor }, needs, "scale")
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s: f64 = self.nodes[xi].value.data().iter().sum();
        let needs = self.needs(xi);
        self.push(Tensor::scalar(s), Op::Sum { x: xi }, needs, "sum")
    }

    /// Mean cross-entropy of `logits[N, K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let shape = self.nodes[li].value.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {shape:?} with {} labels", labels.len()),
            ));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} >= {k} classes"),
            ));
        }
        let z = self.nodes[li].value.data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &z[r * k..(r + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - mx).exp() / denom;
            }
            loss += denom.ln() + mx - row[labels[r]];
        }
        let needs = self.needs(li);
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCe {
                logits: li,
                probs,
                labels: labels.to_vec(),
            },
            needs,
            "softmax_cross_entropy",
        )
    }

    /// Keeps the listed channels (axis 1), in order.
    pub fn gather_channels(&mut self, x: Var, channels: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.select_axis1(channels)?;
        let needs = self.needs(xi);
        self.push(
            out,
            Op::Gather {
                x: xi,
                channels: channels.to_vec(),
            },
            needs,
            "gather_channels",
        )
    }

    /// Places channel `i` of `x` at position `channels[i]` of a zero tensor
    /// with `total` channels.
    pub fn scatter_channels(&mut self, x: Var, channels: &[usize], total: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = self.nodes[xi].value.shape().to_vec();
        if shape.len() < 2 || shape[1] != channels.len() || channels.iter().any(|&c| c >= total) {
            return Err(Error::shape(
                "scatter_channels",
                format!("{shape:?} into {total} channels"),
            ));
        }
        let (n, c, inner) = channel_layout(&shape);
        let xd = self.nodes[xi].value.data();
        let mut out = vec![0.0; n * total * inner];
        for s in 0..n {
            for (k, &dst) in channels.iter().enumerate().take(c) {
                out[(s * total + dst) * inner..][..inner]
                    .copy_from_slice(&xd[(s * c + k) * inner..][..inner]);
            }
        }
        let mut oshape = shape;
        oshape[1] = total;
        let needs = self.needs(xi);
        self.push(
            Tensor::new(oshape, out)?,
            Op::Scatter {
                x: xi,
                channels: channels.to_vec(),
            },
            needs,
            "scatter_channels",
        )
    }

    /// Multiplies channel `c` by `mask[c]`.
    pub fn mask_channels(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = self.nodes[xi].value.shape().to_vec();
        if shape.len() < 2 || shape[1] != mask.len() {
            return Err(Error::shape(
                "mask_channels",
                format!("{shape:?} with {} mask entries", mask.len()),
            ));
        }
        let (n, c, inner) = channel_layout(&shape);
        let mut out = self.nodes[xi].value.data().to_vec();
        for s in 0..n {
            for ch in 0..c {
                out[(s * c + ch) * inner..][..inner]
                    .iter_mut()
                    .for_each(|v| *v *= mask[ch]);
            }
        }
        let needs = self.needs(xi);
        self.push(
            Tensor::new(shape, out)?,
            Op::MaskChannels {
                x: xi,
                mask: mask.to_vec(),
            },
            needs,
            "mask_channels",
        )
    }

    /// Entrywise L1 deviation of a filter Gram matrix from identity.
    ///
    /// Rows of `w` (axis 0) are filters. With `M` filters of length `d`,
    /// the `M x M` Gram of filters is used when `M <= d`, otherwise the
    /// `d x d` Gram of the transposed matrix.
    pub fn gram_penalty(&mut self, w: Var) -> Result<Var> {
        let wi = self.idx(w)?;
        let t = &self.nodes[wi].value;
        let (m, d) = (t.dim0(), t.row_len());
        let fat = m > d;
        let (gram, size) = if fat {
            (kernels::gram_cols(t.data(), m, d), d)
        } else {
            (kernels::gram_rows(t.data(), m, d), m)
        };
        let mut penalty = 0.0;
        let mut sign = vec![0.0; size * size];
        for i in 0..size {
            for j in 0..size {
                let dev = gram[i * size + j] - if i == j { 1.0 } else { 0.0 };
                penalty += dev.abs();
                // subgradient of |0| taken as 0
                sign[i * size + j] = if dev > 0.0 {
                    1.0
                } else if dev < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
        let needs = self.needs(wi);
        self.push(
            Tensor::scalar(penalty),
            Op::GramPenalty { w: wi, sign, fat },
            needs,
            "gram_penalty",
        )
    }

    /// Reverse pass from a scalar loss. Leaf gradients become available via
    /// [`Tape::grad`]; the tape cannot be extended or replayed afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward called twice on one tape"));
        }
        let li = self.idx(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::Tape("loss must be a scalar"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: op_name(&self.nodes[i].op),
                    });
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward loss with respect to `v`, if `v`
    /// participated in it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let i = self.idx(v).ok()?;
        if !self.nodes[i].needs_grad {
            return None;
        }
        self.grads.get(i)?.as_deref()
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let len = |k: usize| nodes[k].value.numel();
        let acc = |k: usize, grads: &mut [Option<Vec<f64>>], f: &mut dyn FnMut(&mut [f64])| {
            if nodes[k].needs_grad {
                let buf = grads[k].get_or_insert_with(|| vec![0.0; len(k)]);
                f(buf);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom } => {
                let (xd, wd) = (nodes[*x].value.data(), nodes[*w].value.data());
                let mut dx = nodes[*x].needs_grad.then(|| vec![0.0; xd.len()]);
                let mut dw = nodes[*w].needs_grad.then(|| vec![0.0; wd.len()]);
                kernels::conv2d_backward(geom, xd, wd, g, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    acc(*x, grads, &mut |b| add_into(b, &dx));
                }
                if let Some(dw) = dw {
                    acc(*w, grads, &mut |b| add_into(b, &dw));
                }
            }
            Op::Depthwise { x, w, geom } => {
                let (xd, wd) = (nodes[*x].value.data(), nodes[*w].value.data());
                let mut dx = nodes[*x].needs_grad.then(|| vec![0.0; xd.len()]);
                let mut dw = nodes[*w].needs_grad.then(|| vec![0.0; wd.len()]);
                kernels::depthwise_backward(geom, xd, wd, g, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    acc(*x, grads, &mut |b| add_into(b, &dx));
                }
                if let Some(dw) = dw {
                    acc(*w, grads, &mut |b| add_into(b, &dw));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train,
                ..
            } => {
                let (n, c, inner) = channel_layout(nodes[*x].value.shape());
                let gam = nodes[*gamma].value.data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * inner;
                        for k in off..off + inner {
                            sum_dy[ch] += g[k];
                            sum_dy_xhat[ch] += g[k] * x_hat[k];
                        }
                    }
                }
                acc(*gamma, grads, &mut |b| add_into(b, &sum_dy_xhat));
                acc(*beta, grads, &mut |b| add_into(b, &sum_dy));
                let m = (n * inner) as f64;
                acc(*x, grads, &mut |b| {
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * inner;
                            let scale = gam[ch] * inv_std[ch];
                            for k in off..off + inner {
                                b[k] += if *train {
                                    scale * (g[k] - sum_dy[ch] / m - x_hat[k] * sum_dy_xhat[ch] / m)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                });
            }
            Op::Relu { x } => {
                let xd = nodes[*x].value.data();
                acc(*x, grads, &mut |b| {
                    for k in 0..b.len() {
                        if xd[k] > 0.0 {
                            b[k] += g[k];
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => acc(*x, grads, &mut |b| {
                for (k, &src) in argmax.iter().enumerate() {
                    b[src] += g[k];
                }
            }),
            Op::GlobalAvgPool { x } => {
                let (_, _, inner) = channel_layout(nodes[*x].value.shape());
                acc(*x, grads, &mut |b| {
                    for (p, gv) in g.iter().enumerate() {
                        b[p * inner..(p + 1) * inner]
                            .iter_mut()
                            .for_each(|v| *v += gv / inner as f64);
                    }
                });
            }
            Op::Dense { x, w } => {
                let (xs, ws) = (nodes[*x].value.shape(), nodes[*w].value.shape());
                let (n, k, m) = (xs[0], xs[1], ws[0]);
                let (xd, wd) = (nodes[*x].value.data(), nodes[*w].value.data());
                acc(*x, grads, &mut |b| {
                    add_into(b, &kernels::matmul(g, wd, n, m, k))
                });
                acc(*w, grads, &mut |b| {
                    let gt = transpose(g, n, m);
                    add_into(b, &kernels::matmul(&gt, xd, m, n, k))
                });
            }
            Op::Add { a, b: bb } => {
                acc(*a, grads, &mut |b| add_into(b, g));
                acc(*bb, grads, &mut |b| add_into(b, g));
            }
            Op::Mul { a, b: bb } => {
                let (ad, bd) = (nodes[*a].value.data(), nodes[*bb].value.data());
                acc(*a, grads, &mut |b| {
                    b.iter_mut()
                        .zip(g.iter().zip(bd))
                        .for_each(|(o, (gv, y))| *o += gv * y)
                });
                acc(*bb, grads, &mut |b| {
                    b.iter_mut()
                        .zip(g.iter().zip(ad))
                        .for_each(|(o, (gv, y))| *o += gv * y)
                });
            }
            Op::Scale { x, factor } => acc(*x, grads, &mut |b| {
                b.iter_mut().zip(g).for_each(|(o, gv)| *o += gv * factor)
            }),
            Op::Sum { x } => acc(*x, grads, &mut |b| b.iter_mut().for_each(|o| *o += g[0])),
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                acc(*logits, grads, &mut |b| {
                    for r in 0..n {
                        for j in 0..k {
                            let target = if j == labels[r] { 1.0 } else { 0.0 };
                            b[r * k + j] += g[0] * (probs[r * k + j] - target) / n as f64;
                        }
                    }
                });
            }
            Op::Gather { x, channels } => {
                let (n, c, inner) = channel_layout(nodes[*x].value.shape());
                let kept = channels.len();
                acc(*x, grads, &mut |b| {
                    for s in 0..n {
                        for (k, &src) in channels.iter().enumerate() {
                            let dst = &mut b[(s * c + src) * inner..][..inner];
                            add_into(dst, &g[(s * kept + k) * inner..][..inner]);
                        }
                    }
                });
            }
            Op::Scatter { x, channels } => {
                let (n, c, inner) = channel_layout(nodes[*x].value.shape());
                let total = nodes[i].value.shape()[1];
                acc(*x, grads, &mut |b| {
                    for s in 0..n {
                        for (k, &dst) in channels.iter().enumerate().take(c) {
                            add_into(
                                &mut b[(s * c + k) * inner..][..inner],
                                &g[(s * total + dst) * inner..][..inner],
                            );
                        }
                    }
                });
            }
            Op::MaskChannels { x, mask } => {
                let (n, c, inner) = channel_layout(nodes[*x].value.shape());
                acc(*x, grads, &mut |b| {
                    for s in 0..n {
                        for (ch, &m) in mask.iter().enumerate().take(c) {
                            let off = (s * c + ch) * inner;
                            for k in off..off + inner {
                                b[k] += g[k] * m;
                            }
                        }
                    }
                });
            }
            Op::GramPenalty { w, sign, fat } => {
                let t = &nodes[*w].value;
                let (m, d) = (t.dim0(), t.row_len());
                // d/dA sum|AA^T - I| = 2 S A ; d/dA sum|A^T A - I| = 2 A S
                let prod = if *fat {
                    kernels::matmul(t.data(), sign, m, d, d)
                } else {
                    kernels::matmul(sign, t.data(), m, m, d)
                };
                acc(*w, grads, &mut |b| {
                    b.iter_mut()
                        .zip(&prod)
                        .for_each(|(o, p)| *o += 2.0 * g[0] * p)
                });
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Depthwise { .. } => "depthwise_conv2d",
        Op::BatchNorm { .. } => "batchnorm",
        Op::Relu { .. } => "relu",
        Op::MaxPool { .. } => "max_pool2",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
        Op::Dense { .. } => "dense",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Sum { .. } => "sum",
        Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        Op::Gather { .. } => "gather_channels",
        Op::Scatter { .. } => "scatter_channels",
        Op::MaskChannels { .. } => "mask_channels",
        Op::GramPenalty { .. } => "gram_penalty",
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Exponential moving average update of running batchnorm statistics.
pub fn update_running_stats(
    running_mean: &mut [f64],
    running_var: &mut [f64],
    mean: &[f64],
    var: &[f64],
) {
    for (r, m) in running_mean.iter_mut().zip(mean) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
    }
    for (r, v) in running_var.iter_mut().zip(var) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
    }
}
