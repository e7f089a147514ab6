//! Reverse-mode automatic differentiation over [`Tensor`] kernels.
//!
//! A [`Tape`] is an arena of values plus the op graph that produced them.
//! The same forward code serves training and inference: a recording tape
//! retains what the backward pass needs, a non-recording tape just computes.
//! Backward walks nodes in reverse creation order and accumulates
//! vector-Jacobian products per input, so gradient reduction order is fixed
//! and results are reproducible bit for bit.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vid(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: Vid,
        b: Vid,
    },
    Transpose2d {
        a: Vid,
    },
    SoftmaxRows {
        a: Vid,
    },
    Conv2d {
        x: Vid,
        w: Vid,
        bias: Option<Vid>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Vid,
        scale: Vid,
        shift: Vid,
        groups: usize,
        means: Vec<f32>,
        rstds: Vec<f32>,
    },
    Linear {
        x: Vid,
        w: Vid,
        b: Vid,
    },
    Silu {
        a: Vid,
    },
    Add {
        a: Vid,
        b: Vid,
    },
    AddScaled {
        a: Vid,
        b: Vid,
        alpha: f32,
    },
    Mul {
        a: Vid,
        b: Vid,
    },
    Scale {
        a: Vid,
        s: f32,
    },
    BiasAddChw {
        x: Vid,
        bias: Vid,
    },
    Upsample2x {
        a: Vid,
    },
    Reshape {
        a: Vid,
        from: Vec<usize>,
    },
    MeanAll {
        a: Vid,
    },
}

/// Arena tape: `values[i]` was produced by `nodes[i]`.
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Op>,
    recording: bool,
}

/// Gradients of one scalar output with respect to tape values.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; `MissingGrad` if `v` never influenced the loss or
    /// lies outside the tape that produced these gradients.
    pub fn get(&self, v: Vid) -> Result<&Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .ok_or_else(|| Error::MissingGrad(format!("no gradient recorded for value {}", v.0)))
    }

    fn accum(&mut self, v: Vid, g: Tensor) -> Result<()> {
        match &mut self.grads[v.0] {
            Some(existing) => *existing = existing.add(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}

impl Tape {
    /// Tape that retains the graph for a later [`Tape::backward`].
    pub fn recording() -> Self {
        Tape {
            values: Vec::new(),
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Tape that only computes; `backward` on it is an error. Reset it
    /// between model invocations to bound memory.
    pub fn inference() -> Self {
        Tape {
            values: Vec::new(),
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of values currently stored.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Drops all values and nodes; existing [`Vid`]s become invalid.
    pub fn reset(&mut self) {
        self.values.clear();
        self.nodes.clear();
    }

    /// Puts a tensor on the tape as a leaf (input, parameter, or constant).
    pub fn leaf(&mut self, t: Tensor) -> Vid {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Vid) -> &Tensor {
        &self.values[v.0]
    }

    /// Owned copy of a value (outputs are small relative to the tape).
    pub fn detach(&self, v: Vid) -> Tensor {
        self.values[v.0].clone()
    }

    fn push(&mut self, t: Tensor, op: Op) -> Vid {
        let id = Vid(self.values.len());
        self.values.push(t);
        // Non-recording tapes keep Vid alignment but drop op structure.
        self.nodes.push(if self.recording { op } else { Op::Leaf });
        id
    }

    pub fn matmul(&mut self, a: Vid, b: Vid) -> Result<Vid> {
        let t = self.values[a.0].matmul(&self.values[b.0])?;
        Ok(self.push(t, Op::Matmul { a, b }))
    }

    pub fn transpose2d(&mut self, a: Vid) -> Result<Vid> {
        let t = self.values[a.0].transpose2d()?;
        Ok(self.push(t, Op::Transpose2d { a }))
    }

    pub fn softmax_rows(&mut self, a: Vid) -> Result<Vid> {
        let t = self.values[a.0].softmax_rows()?;
        Ok(self.push(t, Op::SoftmaxRows { a }))
    }

    pub fn conv2d(
        &mut self,
        x: Vid,
        w: Vid,
        bias: Option<Vid>,
        stride: usize,
        pad: usize,
    ) -> Result<Vid> {
        let bt = bias.map(|b| &self.values[b.0]);
        let t = self.values[x.0].conv2d(&self.values[w.0], bt, stride, pad)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn group_norm(
        &mut self,
        x: Vid,
        groups: usize,
        scale: Vid,
        shift: Vid,
        eps: f32,
    ) -> Result<Vid> {
        let (t, means, rstds) = self.values[x.0].group_norm_stats(
            groups,
            &self.values[scale.0],
            &self.values[shift.0],
            eps,
        )?;
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                scale,
                shift,
                groups,
                means,
                rstds,
            },
        ))
    }

    pub fn linear(&mut self, x: Vid, w: Vid, b: Vid) -> Result<Vid> {
        let t = self.values[x.0].linear(&self.values[w.0], &self.values[b.0])?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    pub fn silu(&mut self, a: Vid) -> Result<Vid> {
        let t = self.values[a.0].silu()?;
        Ok(self.push(t, Op::Silu { a }))
    }

    pub fn add(&mut self, a: Vid, b: Vid) -> Result<Vid> {
        let t = self.values[a.0].add(&self.values[b.0])?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    /// `a + alpha * b`.
    pub fn add_scaled(&mut self, a: Vid, b: Vid, alpha: f32) -> Result<Vid> {
        let t = self.values[a.0].add_scaled(&self.values[b.0], alpha)?;
        Ok(self.push(t, Op::AddScaled { a, b, alpha }))
    }

    pub fn mul(&mut self, a: Vid, b: Vid) -> Result<Vid> {
        let t = self.values[a.0].mul(&self.values[b.0])?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Vid, s: f32) -> Result<Vid> {
        let t = self.values[a.0].scale(s)?;
        Ok(self.push(t, Op::Scale { a, s }))
    }

    pub fn bias_add_chw(&mut self, x: Vid, bias: Vid) -> Result<Vid> {
        let t = self.values[x.0].bias_add_chw(&self.values[bias.0])?;
        Ok(self.push(t, Op::BiasAddChw { x, bias }))
    }

    pub fn upsample2x(&mut self, a: Vid) -> Result<Vid> {
        let t = self.values[a.0].upsample2x()?;
        Ok(self.push(t, Op::Upsample2x { a }))
    }

    pub fn reshape(&mut self, a: Vid, shape: &[usize]) -> Result<Vid> {
        let from = self.values[a.0].shape().to_vec();
        let t = self.values[a.0].reshape(shape)?;
        Ok(self.push(t, Op::Reshape { a, from }))
    }

    pub fn mean_all(&mut self, a: Vid) -> Result<Vid> {
        let t = self.values[a.0].mean_all()?;
        Ok(self.push(t, Op::MeanAll { a }))
    }

    /// Reverse-mode sweep from scalar `loss` back to every contributing
    /// value. Nodes are visited newest-first; per value, incoming
    /// contributions add in visit order, which is fixed by construction.
    pub fn backward(&self, loss: Vid) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::Config("backward requires a recording tape".into()));
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut g = Gradients {
            grads: vec![None; self.values.len()],
        };
        g.grads[loss.0] = Some(Tensor::full(self.values[loss.0].shape(), 1.0));

        for (i, op) in self.nodes.iter().enumerate().take(loss.0 + 1).rev() {
            let dy = match &g.grads[i] {
                Some(d) => d.clone(),
                None => continue,
            };
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let bt = self.values[b.0].transpose2d()?;
                    g.accum(*a, dy.matmul(&bt)?)?;
                    let at = self.values[a.0].transpose2d()?;
                    g.accum(*b, at.matmul(&dy)?)?;
                }
                Op::Transpose2d { a } => {
                    g.accum(*a, dy.transpose2d()?)?;
                }
                Op::SoftmaxRows { a } => {
                    g.accum(*a, softmax_rows_vjp(&self.values[i], &dy))?;
                }
                Op::Conv2d {
                    x,
                    w,
                    bias,
                    stride,
                    pad,
                } => {
                    g.accum(
                        *x,
                        tensor::conv2d_grad_input(
                            &dy,
                            &self.values[w.0],
                            self.values[x.0].shape(),
                            *stride,
                            *pad,
                        ),
                    )?;
                    let kshape = self.values[w.0].shape();
                    g.accum(
                        *w,
                        tensor::conv2d_grad_weight(
                            &self.values[x.0],
                            &dy,
                            kshape[2],
                            kshape[3],
                            *stride,
                            *pad,
                        ),
                    )?;
                    if let Some(b) = bias {
                        g.accum(*b, tensor::conv2d_grad_bias(&dy))?;
                    }
                }
                Op::GroupNorm {
                    x,
                    scale,
                    shift,
                    groups,
                    means,
                    rstds,
                } => {
                    let (dx, dscale, dshift) = group_norm_vjp(
                        &self.values[x.0],
                        &self.values[scale.0],
                        &dy,
                        *groups,
                        means,
                        rstds,
                    );
                    g.accum(*x, dx)?;
                    g.accum(*scale, dscale)?;
                    g.accum(*shift, dshift)?;
                }
                Op::Linear { x, w, b } => {
                    g.accum(*x, dy.matmul(&self.values[w.0])?)?;
                    let dyt = dy.transpose2d()?;
                    g.accum(*w, dyt.matmul(&self.values[x.0])?)?;
                    g.accum(*b, column_sums(&dy))?;
                }
                Op::Silu { a } => {
                    g.accum(*a, silu_vjp(&self.values[a.0], &dy))?;
                }
                Op::Add { a, b } => {
                    g.accum(*a, dy.clone())?;
                    g.accum(*b, dy)?;
                }
                Op::AddScaled { a, b, alpha } => {
                    g.accum(*a, dy.clone())?;
                    g.accum(*b, dy.scale(*alpha)?)?;
                }
                Op::Mul { a, b } => {
                    g.accum(*a, dy.mul(&self.values[b.0])?)?;
                    g.accum(*b, dy.mul(&self.values[a.0])?)?;
                }
                Op::Scale { a, s } => {
                    g.accum(*a, dy.scale(*s)?)?;
                }
                Op::BiasAddChw { x, bias } => {
                    g.accum(*x, dy.clone())?;
                    let db = tensor::conv2d_grad_bias(&dy);
                    g.accum(*bias, db.reshape(self.values[bias.0].shape())?)?;
                }
                Op::Upsample2x { a } => {
                    g.accum(*a, upsample2x_vjp(&dy))?;
                }
                Op::Reshape { a, from } => {
                    g.accum(*a, dy.reshape(from)?)?;
                }
                Op::MeanAll { a } => {
                    let src = &self.values[a.0];
                    let v = dy.data()[0] / src.numel() as f32;
                    g.accum(*a, Tensor::full(src.shape(), v))?;
                }
            }
        }
        Ok(g)
    }
}

/// dX for Y = softmax_rows(X): dx = y ⊙ (dy − rowdot(dy, y)).
fn softmax_rows_vjp(y: &Tensor, dy: &Tensor) -> Tensor {
    let cols = y.shape()[1];
    let mut out = vec![0.0f32; y.numel()];
    for ((orow, yrow), dyrow) in out
        .chunks_mut(cols)
        .zip(y.data().chunks(cols))
        .zip(dy.data().chunks(cols))
    {
        let mut dot = 0.0f64;
        for (yv, dv) in yrow.iter().zip(dyrow) {
            dot += (*yv as f64) * (*dv as f64);
        }
        let dot = dot as f32;
        for ((o, yv), dv) in orow.iter_mut().zip(yrow).zip(dyrow) {
            *o = yv * (dv - dot);
        }
    }
    Tensor::from_raw(y.shape().to_vec(), out)
}

fn silu_vjp(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &d)| {
            let s = tensor::sigmoid_f32(v);
            d * (s + v * s * (1.0 - s))
        })
        .collect();
    Tensor::from_raw(x.shape().to_vec(), data)
}

fn group_norm_vjp(
    x: &Tensor,
    scale: &Tensor,
    dy: &Tensor,
    groups: usize,
    means: &[f32],
    rstds: &[f32],
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let plane = h * w;
    let cpg = c / groups;
    let gsize = cpg * plane;
    let mut dx = vec![0.0f32; c * plane];
    let mut dscale = vec![0.0f32; c];
    let mut dshift = vec![0.0f32; c];
    for g in 0..groups {
        let (mean, rstd) = (means[g], rstds[g]);
        let xs = &x.data()[g * gsize..(g + 1) * gsize];
        let dys = &dy.data()[g * gsize..(g + 1) * gsize];
        // Per-channel affine grads plus group-wide sums for the input grad.
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        for ch_idx in 0..cpg {
            let ch = g * cpg + ch_idx;
            let sc = scale.data()[ch];
            let (mut dsc, mut dsh) = (0.0f64, 0.0f64);
            for p in 0..plane {
                let xhat = (xs[ch_idx * plane + p] - mean) * rstd;
                let d = dys[ch_idx * plane + p];
                dsc += (d * xhat) as f64;
                dsh += d as f64;
                let dxhat = (d * sc) as f64;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat as f64;
            }
            dscale[ch] = dsc as f32;
            dshift[ch] = dsh as f32;
        }
        let m = gsize as f64;
        let mean_dxhat = (sum_dxhat / m) as f32;
        let mean_dxhat_xhat = (sum_dxhat_xhat / m) as f32;
        let dxs = &mut dx[g * gsize..(g + 1) * gsize];
        for ch_idx in 0..cpg {
            let ch = g * cpg + ch_idx;
            let sc = scale.data()[ch];
            for p in 0..plane {
                let xhat = (xs[ch_idx * plane + p] - mean) * rstd;
                let dxhat = dys[ch_idx * plane + p] * sc;
                dxs[ch_idx * plane + p] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
    }
    (
        Tensor::from_raw(vec![c, h, w], dx),
        Tensor::from_raw(vec![c], dscale),
        Tensor::from_raw(vec![c], dshift),
    )
}

fn upsample2x_vjp(dy: &Tensor) -> Tensor {
    let (c, h2, w2) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for dy_ in 0..2 {
                    for dx_ in 0..2 {
                        acc += dy.data()[ch * h2 * w2 + (2 * y + dy_) * w2 + 2 * x + dx_];
                    }
                }
                dx[ch * h * w + y * w + x] = acc;
            }
        }
    }
    Tensor::from_raw(vec![c, h, w], dx)
}

/// Column sums of a 2-d tensor in f64, as a `[cols]` tensor.
fn column_sums(dy: &Tensor) -> Tensor {
    let (r, c) = (dy.shape()[0], dy.shape()[1]);
    let mut out = vec![0.0f64; c];
    for row in 0..r {
        for (o, &v) in out.iter_mut().zip(&dy.data()[row * c..(row + 1) * c]) {
            *o += v as f64;
        }
    }
    Tensor::from_raw(vec![c], out.into_iter().map(|v| v as f32).collect())
}
