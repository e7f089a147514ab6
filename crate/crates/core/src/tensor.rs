//! Dense f32 tensors and the raw kernels behind the toy diffusion model.
//!
//! Values are immutable once constructed; every op allocates its output.
//! Kernels keep a fixed per-element accumulation order (sequential over the
//! innermost reduction index), so results are bit-identical run to run and
//! independent of the rayon thread count. Reductions that feed statistics
//! (softmax normalization, means, variances) accumulate in f64.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Dense row-major tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Work size above which kernels fan out over rayon. Outputs are partitioned
/// disjointly, so the split never changes numeric results.
const PAR_THRESHOLD: usize = 1 << 15;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {expected} elements, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.validate_finite("new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Unit-gaussian samples in the given shape, drawn sequentially from `rng`.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Construct without the finite scan. For kernel outputs that are checked
    /// separately, and for buffers built from already-validated values.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn validate_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{op} produced non-finite values")))
        }
    }

    fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "{op} expects a 2-d tensor, got {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn dims3(&self, op: &str) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::Shape(format!(
                "{op} expects a 3-d tensor, got {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose2d")?;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_raw(vec![c, r], out))
    }

    /// Matrix product `self[m,k] · b[k,n]`.
    ///
    /// Each output element accumulates over k in order, so the result does
    /// not depend on how rows are distributed across threads.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul lhs")?;
        let (k2, n) = b.dims2("matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims disagree: {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0f32; m * n];
        let a = &self.data;
        let bd = &b.data;
        let row_work = k * n;
        let body = |i: usize, orow: &mut [f32]| {
            let arow = &a[i * k..i * k + k];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &bd[p * n..p * n + n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = av.mul_add(bv, *o);
                }
            }
        };
        if m * row_work >= PAR_THRESHOLD {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, orow)| body(i, orow));
        } else {
            for (i, orow) in out.chunks_mut(n).enumerate() {
                body(i, orow);
            }
        }
        let t = Tensor::from_raw(vec![m, n], out);
        t.validate_finite("matmul")?;
        Ok(t)
    }

    /// Row-wise softmax with max-subtraction; sums and normalization in f64.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("softmax_rows")?;
        let mut out = vec![0.0f32; r * c];
        let body = |row: &[f32], orow: &mut [f32]| {
            // Separate passes so exp and the lane sums vectorize. Lane
            // layout is fixed, so the result is independent of threading.
            let max = max_all(row);
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = exp_f32(v - max);
            }
            let inv = 1.0 / sum_f64(orow);
            for o in orow.iter_mut() {
                *o = (*o as f64 * inv) as f32;
            }
        };
        if r * c >= PAR_THRESHOLD {
            out.par_chunks_mut(c)
                .zip(self.data.par_chunks(c))
                .for_each(|(orow, row)| body(row, orow));
        } else {
            for (orow, row) in out.chunks_mut(c).zip(self.data.chunks(c)) {
                body(row, orow);
            }
        }
        let t = Tensor::from_raw(vec![r, c], out);
        t.validate_finite("softmax_rows")?;
        Ok(t)
    }

    /// 2-d cross-correlation. `self` is `[c_in, h, w]`, `weight` is
    /// `[c_out, c_in, kh, kw]`, optional `bias` is `[c_out]`.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (c_in, h, w) = self.dims3("conv2d input")?;
        if weight.shape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d weight must be 4-d, got {:?}",
                weight.shape
            )));
        }
        let (c_out, wc_in, kh, kw) = (
            weight.shape[0],
            weight.shape[1],
            weight.shape[2],
            weight.shape[3],
        );
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {c_in}, weight expects {wc_in}"
            )));
        }
        if let Some(b) = bias {
            if b.shape != [c_out] {
                return Err(Error::Shape(format!(
                    "conv2d bias must be [{c_out}], got {:?}",
                    b.shape
                )));
            }
        }
        let (h_out, w_out) = conv_out_size(h, w, kh, kw, stride, pad)?;

        let padded = pad_planes(&self.data, c_in, h, w, pad);
        let pw = w + 2 * pad;
        let wd = &weight.data;
        let mut out = vec![0.0f32; c_out * h_out * w_out];
        let plane = h_out * w_out;
        let body = |co: usize, oplane: &mut [f32]| {
            if let Some(b) = bias {
                oplane.fill(b.data[co]);
            }
            for ci in 0..c_in {
                let xp = &padded[ci * (h + 2 * pad) * pw..(ci + 1) * (h + 2 * pad) * pw];
                let ker = &wd[(co * c_in + ci) * kh * kw..(co * c_in + ci + 1) * kh * kw];
                if stride == 1 && kh == 3 && kw == 3 {
                    conv_tap9(oplane, xp, pw, ker, h_out, w_out);
                } else {
                    conv_taps(oplane, xp, pw, ker, kh, kw, stride, h_out, w_out);
                }
            }
        };
        if c_out * plane * c_in * kh * kw >= PAR_THRESHOLD {
            out.par_chunks_mut(plane)
                .enumerate()
                .for_each(|(co, p)| body(co, p));
        } else {
            for (co, p) in out.chunks_mut(plane).enumerate() {
                body(co, p);
            }
        }
        let t = Tensor::from_raw(vec![c_out, h_out, w_out], out);
        t.validate_finite("conv2d")?;
        Ok(t)
    }

    /// Group normalization over `[c, h, w]` with per-channel affine.
    /// Statistics are accumulated in f64; see `group_norm_stats` for the
    /// variant that also returns them (used by the backward pass).
    pub fn group_norm(
        &self,
        groups: usize,
        scale: &Tensor,
        shift: &Tensor,
        eps: f32,
    ) -> Result<Tensor> {
        Ok(self.group_norm_stats(groups, scale, shift, eps)?.0)
    }

    pub(crate) fn group_norm_stats(
        &self,
        groups: usize,
        scale: &Tensor,
        shift: &Tensor,
        eps: f32,
    ) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
        let (c, h, w) = self.dims3("group_norm")?;
        if eps <= 0.0 {
            return Err(Error::Range(format!(
                "group_norm eps must be positive, got {eps}"
            )));
        }
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape(format!(
                "{c} channels not divisible into {groups} groups"
            )));
        }
        if scale.shape != [c] || shift.shape != [c] {
            return Err(Error::Shape(format!(
                "group_norm affine must be [{c}], got {:?} / {:?}",
                scale.shape, shift.shape
            )));
        }
        let plane = h * w;
        let gsize = (c / groups) * plane;
        let mut out = vec![0.0f32; c * plane];
        let mut means = vec![0.0f32; groups];
        let mut rstds = vec![0.0f32; groups];
        for g in 0..groups {
            let seg = &self.data[g * gsize..(g + 1) * gsize];
            let mean = sum_f64(seg) / gsize as f64;
            let var = sumsq_dev_f64(seg, mean) / gsize as f64;
            let rstd = 1.0 / (var + eps as f64).sqrt();
            means[g] = mean as f32;
            rstds[g] = rstd as f32;
            let (m32, r32) = (mean as f32, rstd as f32);
            let oseg = &mut out[g * gsize..(g + 1) * gsize];
            for (ch_idx, chunk) in oseg.chunks_mut(plane).enumerate() {
                let ch = g * (c / groups) + ch_idx;
                let (sc, sh) = (scale.data[ch], shift.data[ch]);
                let src = &seg[ch_idx * plane..(ch_idx + 1) * plane];
                for (o, &v) in chunk.iter_mut().zip(src) {
                    *o = ((v - m32) * r32).mul_add(sc, sh);
                }
            }
        }
        let t = Tensor::from_raw(vec![c, h, w], out);
        t.validate_finite("group_norm")?;
        Ok((t, means, rstds))
    }

    /// Affine map `self[n,in] · weight[out,in]ᵀ + bias[out]`.
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (n, d_in) = self.dims2("linear input")?;
        let (d_out, w_in) = weight.dims2("linear weight")?;
        if w_in != d_in {
            return Err(Error::Shape(format!(
                "linear: input dim {d_in} vs weight dim {w_in}"
            )));
        }
        if bias.shape != [d_out] {
            return Err(Error::Shape(format!(
                "linear bias must be [{d_out}], got {:?}",
                bias.shape
            )));
        }
        // Transposed weight makes the inner axpy loop contiguous.
        let wt = weight.transpose2d()?;
        let mut out = vec![0.0f32; n * d_out];
        let x = &self.data;
        let wtd = &wt.data;
        let body = |i: usize, orow: &mut [f32]| {
            orow.copy_from_slice(&bias.data);
            let xrow = &x[i * d_in..(i + 1) * d_in];
            for (p, &xv) in xrow.iter().enumerate() {
                let wrow = &wtd[p * d_out..(p + 1) * d_out];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o = xv.mul_add(wv, *o);
                }
            }
        };
        if n * d_in * d_out >= PAR_THRESHOLD {
            out.par_chunks_mut(d_out)
                .enumerate()
                .for_each(|(i, orow)| body(i, orow));
        } else {
            for (i, orow) in out.chunks_mut(d_out).enumerate() {
                body(i, orow);
            }
        }
        let t = Tensor::from_raw(vec![n, d_out], out);
        t.validate_finite("linear")?;
        Ok(t)
    }

    pub fn silu(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|&v| v * sigmoid_f32(v)).collect();
        let t = Tensor::from_raw(self.shape.clone(), data);
        t.validate_finite("silu")?;
        Ok(t)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, other: &Tensor, alpha: f32) -> Result<Tensor> {
        self.zip_with(other, "add_scaled", |a, b| alpha.mul_add(b, a))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Result<Tensor> {
        let data = self.data.iter().map(|&v| v * s).collect();
        let t = Tensor::from_raw(self.shape.clone(), data);
        t.validate_finite("scale")?;
        Ok(t)
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let t = Tensor::from_raw(self.shape.clone(), data);
        t.validate_finite(op)?;
        Ok(t)
    }

    /// Adds `bias[c]` to every spatial position of `self[c,h,w]`.
    pub fn bias_add_chw(&self, bias: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.dims3("bias_add_chw")?;
        if bias.numel() != c {
            return Err(Error::Shape(format!(
                "bias_add_chw: bias has {} elements for {c} channels",
                bias.numel()
            )));
        }
        let plane = h * w;
        let mut out = self.data.clone();
        for (ch, chunk) in out.chunks_mut(plane).enumerate() {
            let b = bias.data[ch];
            for o in chunk {
                *o += b;
            }
        }
        let t = Tensor::from_raw(self.shape.clone(), out);
        t.validate_finite("bias_add_chw")?;
        Ok(t)
    }

    /// Nearest-neighbor 2x upsample of `[c,h,w]`.
    pub fn upsample2x(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3("upsample2x")?;
        let mut out = vec![0.0f32; c * 4 * h * w];
        let ow = 2 * w;
        for ch in 0..c {
            for y in 0..h {
                let src = &self.data[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                let base = ch * 4 * h * w + 2 * y * ow;
                for (x, &v) in src.iter().enumerate() {
                    out[base + 2 * x] = v;
                    out[base + 2 * x + 1] = v;
                }
                let (row0, row1) = out[base..base + 2 * ow].split_at_mut(ow);
                row1.copy_from_slice(row0);
            }
        }
        Ok(Tensor::from_raw(vec![c, 2 * h, 2 * w], out))
    }

    /// Mean over every element, accumulated in f64, as a `[1]` tensor.
    pub fn mean_all(&self) -> Result<Tensor> {
        let m = (sum_f64(&self.data) / self.data.len() as f64) as f32;
        let t = Tensor::from_raw(vec![1], vec![m]);
        t.validate_finite("mean_all")?;
        Ok(t)
    }
}

fn conv_out_size(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Range("conv2d stride must be positive".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} does not fit padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let (dh, dw) = (h + 2 * pad - kh, w + 2 * pad - kw);
    if dh % stride != 0 || dw % stride != 0 {
        return Err(Error::Shape(format!(
            "non-integral conv output: span {dh}x{dw} not divisible by stride {stride}"
        )));
    }
    Ok((dh / stride + 1, dw / stride + 1))
}

pub(crate) fn pad_planes(data: &[f32], c: usize, h: usize, w: usize, pad: usize) -> Vec<f32> {
    if pad == 0 {
        return data.to_vec();
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0f32; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = &data[ch * h * w + y * w..ch * h * w + (y + 1) * w];
            let dst_base = ch * ph * pw + (y + pad) * pw + pad;
            out[dst_base..dst_base + w].copy_from_slice(src);
        }
    }
    out
}

/// 3x3 stride-1 path: all nine taps folded into one pass per output row.
fn conv_tap9(out: &mut [f32], xp: &[f32], pw: usize, k: &[f32], h_out: usize, w_out: usize) {
    let (k00, k01, k02) = (k[0], k[1], k[2]);
    let (k10, k11, k12) = (k[3], k[4], k[5]);
    let (k20, k21, k22) = (k[6], k[7], k[8]);
    for y in 0..h_out {
        let r0 = &xp[y * pw..y * pw + w_out + 2];
        let r1 = &xp[(y + 1) * pw..(y + 1) * pw + w_out + 2];
        let r2 = &xp[(y + 2) * pw..(y + 2) * pw + w_out + 2];
        let orow = &mut out[y * w_out..(y + 1) * w_out];
        for x in 0..w_out {
            let mut acc = orow[x];
            acc = k00.mul_add(r0[x], acc);
            acc = k01.mul_add(r0[x + 1], acc);
            acc = k02.mul_add(r0[x + 2], acc);
            acc = k10.mul_add(r1[x], acc);
            acc = k11.mul_add(r1[x + 1], acc);
            acc = k12.mul_add(r1[x + 2], acc);
            acc = k20.mul_add(r2[x], acc);
            acc = k21.mul_add(r2[x + 1], acc);
            acc = k22.mul_add(r2[x + 2], acc);
            orow[x] = acc;
        }
    }
}

/// Generic tap loop, same (dy, dx) accumulation order as `conv_tap9`.
fn conv_taps(
    out: &mut [f32],
    xp: &[f32],
    pw: usize,
    k: &[f32],
    kh: usize,
    kw: usize,
    stride: usize,
    h_out: usize,
    w_out: usize,
) {
    for y in 0..h_out {
        let orow = &mut out[y * w_out..(y + 1) * w_out];
        for x in 0..w_out {
            let mut acc = orow[x];
            for dy in 0..kh {
                let row = &xp[(y * stride + dy) * pw + x * stride..];
                for dx in 0..kw {
                    acc = k[dy * kw + dx].mul_add(row[dx], acc);
                }
            }
            orow[x] = acc;
        }
    }
}

/// dL/dInput of conv2d: scatter dY back through the kernel. Parallel over
/// input channels; per cell the (c_out, tap, position) order is fixed.
pub(crate) fn conv2d_grad_input(
    dy: &Tensor,
    weight: &Tensor,
    in_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (c_out, kh, kw) = (weight.shape[0], weight.shape[2], weight.shape[3]);
    let (h_out, w_out) = (dy.shape[1], dy.shape[2]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut dx = vec![0.0f32; c_in * h * w];
    let wd = &weight.data;
    let dyd = &dy.data;
    let body = |ci: usize, dplane: &mut [f32]| {
        let mut dxp = vec![0.0f32; ph * pw];
        for co in 0..c_out {
            let ker = &wd[(co * c_in + ci) * kh * kw..(co * c_in + ci + 1) * kh * kw];
            let dyplane = &dyd[co * h_out * w_out..(co + 1) * h_out * w_out];
            for dy_ in 0..kh {
                for dx_ in 0..kw {
                    let kv = ker[dy_ * kw + dx_];
                    for oy in 0..h_out {
                        let dyrow = &dyplane[oy * w_out..(oy + 1) * w_out];
                        let dst = &mut dxp[(oy * stride + dy_) * pw + dx_..];
                        if stride == 1 {
                            for (ox, &g) in dyrow.iter().enumerate() {
                                dst[ox] = kv.mul_add(g, dst[ox]);
                            }
                        } else {
                            for (ox, &g) in dyrow.iter().enumerate() {
                                dst[ox * stride] = kv.mul_add(g, dst[ox * stride]);
                            }
                        }
                    }
                }
            }
        }
        for y in 0..h {
            let src = &dxp[(y + pad) * pw + pad..(y + pad) * pw + pad + w];
            dplane[y * w..(y + 1) * w].copy_from_slice(src);
        }
    };
    if c_in * c_out * h_out * w_out * kh * kw >= PAR_THRESHOLD {
        dx.par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(ci, p)| body(ci, p));
    } else {
        for (ci, p) in dx.chunks_mut(h * w).enumerate() {
            body(ci, p);
        }
    }
    Tensor::from_raw(vec![c_in, h, w], dx)
}

/// dL/dWeight of conv2d. Row dots run in 8 f32 lanes folded into an f64
/// accumulator per output row; lane layout is fixed, so results are stable.
pub(crate) fn conv2d_grad_weight(
    x: &Tensor,
    dy: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (c_in, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (c_out, h_out, w_out) = (dy.shape[0], dy.shape[1], dy.shape[2]);
    let padded = pad_planes(&x.data, c_in, h, w, pad);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let _ = ph;
    let mut dw = vec![0.0f32; c_out * c_in * kh * kw];
    let dyd = &dy.data;
    let body = |co: usize, dwseg: &mut [f32]| {
        let dyplane = &dyd[co * h_out * w_out..(co + 1) * h_out * w_out];
        for ci in 0..c_in {
            let xp = &padded[ci * (h + 2 * pad) * pw..(ci + 1) * (h + 2 * pad) * pw];
            for dy_ in 0..kh {
                for dx_ in 0..kw {
                    let mut acc = 0.0f64;
                    for oy in 0..h_out {
                        let dyrow = &dyplane[oy * w_out..(oy + 1) * w_out];
                        let xrow = &xp[(oy * stride + dy_) * pw + dx_..];
                        if stride == 1 {
                            acc += dot8(dyrow, &xrow[..w_out]);
                        } else {
                            let mut s = 0.0f64;
                            for (ox, &g) in dyrow.iter().enumerate() {
                                s += (g * xrow[ox * stride]) as f64;
                            }
                            acc += s;
                        }
                    }
                    dwseg[ci * kh * kw + dy_ * kw + dx_] = acc as f32;
                }
            }
        }
    };
    if c_out * c_in * kh * kw * h_out * w_out >= PAR_THRESHOLD {
        dw.par_chunks_mut(c_in * kh * kw)
            .enumerate()
            .for_each(|(co, seg)| body(co, seg));
    } else {
        for (co, seg) in dw.chunks_mut(c_in * kh * kw).enumerate() {
            body(co, seg);
        }
    }
    Tensor::from_raw(vec![c_out, c_in, kh, kw], dw)
}

pub(crate) fn conv2d_grad_bias(dy: &Tensor) -> Tensor {
    let (c_out, h_out, w_out) = (dy.shape[0], dy.shape[1], dy.shape[2]);
    let plane = h_out * w_out;
    let mut db = vec![0.0f32; c_out];
    for (co, b) in db.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for &g in &dy.data[co * plane..(co + 1) * plane] {
            acc += g as f64;
        }
        *b = acc as f32;
    }
    Tensor::from_raw(vec![c_out], db)
}

/// Max over a slice of finite values (order-independent for finite inputs).
fn max_all(v: &[f32]) -> f32 {
    let mut lanes = [f32::NEG_INFINITY; 8];
    let chunks = v.len() / 8;
    for i in 0..chunks {
        let c = &v[i * 8..i * 8 + 8];
        for l in 0..8 {
            if c[l] > lanes[l] {
                lanes[l] = c[l];
            }
        }
    }
    let mut m = f32::NEG_INFINITY;
    for &l in &lanes {
        if l > m {
            m = l;
        }
    }
    for &x in &v[chunks * 8..] {
        if x > m {
            m = x;
        }
    }
    m
}

/// Sum in 8 fixed f64 lanes, folded lane 0..7, remainder appended.
pub(crate) fn sum_f64(v: &[f32]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let chunks = v.len() / 8;
    for i in 0..chunks {
        let c = &v[i * 8..i * 8 + 8];
        for l in 0..8 {
            lanes[l] += c[l] as f64;
        }
    }
    let mut acc = 0.0f64;
    for &l in &lanes {
        acc += l;
    }
    for &x in &v[chunks * 8..] {
        acc += x as f64;
    }
    acc
}

/// Sum of squared deviations from `mean`, 8 fixed f64 lanes.
fn sumsq_dev_f64(v: &[f32], mean: f64) -> f64 {
    let mut lanes = [0.0f64; 8];
    let chunks = v.len() / 8;
    for i in 0..chunks {
        let c = &v[i * 8..i * 8 + 8];
        for l in 0..8 {
            let d = c[l] as f64 - mean;
            lanes[l] = d.mul_add(d, lanes[l]);
        }
    }
    let mut acc = 0.0f64;
    for &l in &lanes {
        acc += l;
    }
    for &x in &v[chunks * 8..] {
        let d = x as f64 - mean;
        acc = d.mul_add(d, acc);
    }
    acc
}

/// Dot product in 8 fixed f32 lanes, folded lane 0..7 into f64.
fn dot8(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (av, bv) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            lanes[l] = av[l].mul_add(bv[l], lanes[l]);
        }
    }
    let mut acc = 0.0f64;
    for &l in &lanes {
        acc += l as f64;
    }
    for i in chunks * 8..a.len() {
        acc += (a[i] * b[i]) as f64;
    }
    acc
}

// Polynomial expf (Cephes-style): |relative error| < 3e-7 over the clamped
// range, fully vectorizable. Both softmax and silu sit on the inference hot
// path, where libm's scalar exp dominates otherwise.
const EXP_HI: f32 = 87.0;
const EXP_LO: f32 = -87.0;
const LOG2E: f32 = 1.442_695;
const LN2_HI: f32 = 0.693_359_4;
const LN2_LO: f32 = -2.121_944_4e-4;

#[inline]
pub(crate) fn exp_f32(x: f32) -> f32 {
    let x = x.clamp(EXP_LO, EXP_HI);
    // floor(x+0.5) instead of round(): floor lowers to a single rounding
    // instruction, which keeps the whole function auto-vectorizable.
    let n = (x * LOG2E + 0.5).floor();
    let f = (-n).mul_add(LN2_LO, (-n).mul_add(LN2_HI, x));
    let mut p = 1.987_569_1e-4f32;
    p = p.mul_add(f, 1.398_199_9e-3);
    p = p.mul_add(f, 8.333_452e-3);
    p = p.mul_add(f, 4.166_579_6e-2);
    p = p.mul_add(f, 1.666_666_6e-1);
    p = p.mul_add(f, 5e-1);
    p = p.mul_add(f * f, f) + 1.0;
    let bits = ((n as i32 + 127) as u32) << 23;
    p * f32::from_bits(bits)
}

#[inline]
pub(crate) fn sigmoid_f32(x: f32) -> f32 {
    1.0 / (1.0 + exp_f32(-x))
}
