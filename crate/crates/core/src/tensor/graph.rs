//! Reverse-mode tape. Nodes are appended in evaluation order, so the node
//! list is already topologically sorted and backward is a single reverse
//! sweep.

use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu(Var),
    Silu(Var),
    Tanh(Var),
    GroupNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Film {
        x: Var,
        scale: Var,
        shift: Var,
    },
    AvgPool2d {
        x: Var,
        k: usize,
    },
    Upsample2d {
        x: Var,
        factor: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    StraightThrough(Var),
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }
    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Build a fresh graph per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; gradients are retained for it after `backward`.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.grad = None;
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient (inputs, detached values).
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.grad = None;
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Value of `v` with its `grad` field populated (zeros if unreached).
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        t.grad = Some(
            self.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]),
        );
        t
    }

    /// Clears gradients so `backward` may run again on the same tape.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---- elementwise ---------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    // ---- linear algebra ------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let n = sb[0];
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(v, Op::AddBias(x, bias), rg))
    }

    /// 2-D convolution, `x: [B, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
            }
        }
        let (in_h, in_w) = (sx[2] + 2 * pad, sx[3] + 2 * pad);
        if in_h < sw[2] || in_w < sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_c: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_c: sw[0],
            kh: sw[2],
            kw: sw[3],
            out_h: (in_h - sw[2]) / stride + 1,
            out_w: (in_w - sw[3]) / stride + 1,
            stride,
            pad,
        };
        let (patch, ohw) = (geom.patch(), geom.out_hw());
        let xd = self.value(x).data();
        let mut cols = vec![0.0; geom.batch * patch * ohw];
        for bi in 0..geom.batch {
            let xs = &xd[bi * geom.in_c * geom.in_h * geom.in_w..];
            im2col(&geom, xs, &mut cols[bi * patch * ohw..(bi + 1) * patch * ohw]);
        }
        let wd = self.value(w).data();
        let mut out = vec![0.0; geom.batch * geom.out_c * ohw];
        for bi in 0..geom.batch {
            gemm(
                MatRef::new(wd, geom.out_c, patch),
                MatRef::new(&cols[bi * patch * ohw..(bi + 1) * patch * ohw], patch, ohw),
                &mut out[bi * geom.out_c * ohw..(bi + 1) * geom.out_c * ohw],
                false,
            );
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (i, chunk) in out.chunks_mut(ohw).enumerate() {
                let bias = bd[i % geom.out_c];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let value = Tensor::new(vec![geom.batch, geom.out_c, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    // ---- normalization & conditioning ----------------------------------

    /// Group normalization over `[B, C, H, W]` with optional per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || groups == 0 || s[1] % groups != 0 {
            return Err(Error::shape("group_norm", &s, &[groups]));
        }
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [s[1]] {
                return Err(Error::shape("group_norm affine", &s, self.shape(p)));
            }
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let group_len = (c / groups) * hw;
        let xd = self.value(x).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; b * groups];
        for (gi, chunk) in xd.chunks(group_len).enumerate() {
            let mean = chunk.iter().sum::<f64>() / group_len as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[gi] = inv;
            for (o, v) in xhat[gi * group_len..(gi + 1) * group_len].iter_mut().zip(chunk) {
                *o = (v - mean) * inv;
            }
        }
        let mut out = xhat.clone();
        if gamma.is_some() || beta.is_some() {
            let gd = gamma.map(|g| self.value(g).data().to_vec());
            let bd = beta.map(|g| self.value(g).data().to_vec());
            for (i, chunk) in out.chunks_mut(hw).enumerate() {
                let ch = i % c;
                let gm = gd.as_ref().map_or(1.0, |g| g[ch]);
                let bt = bd.as_ref().map_or(0.0, |g| g[ch]);
                chunk.iter_mut().for_each(|v| *v = *v * gm + bt);
            }
        }
        let rg = self.rg(x) || [gamma, beta].into_iter().flatten().any(|p| self.rg(p));
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Feature-wise affine modulation: `x[b,c,..] * scale[b,c] + shift[b,c]`.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("film", &s, self.shape(scale)));
        }
        let bc = [s[0], s[1]];
        if self.shape(scale) != bc {
            return Err(Error::shape("film scale", &s, self.shape(scale)));
        }
        if self.shape(shift) != bc {
            return Err(Error::shape("film shift", &s, self.shape(shift)));
        }
        let inner: usize = s[2..].iter().product();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut v = self.value(x).clone();
        for (i, chunk) in v.data_mut().chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|e| *e = *e * sc[i] + sh[i]);
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(v, Op::Film { x, scale, shift }, rg))
    }

    // ---- resampling & layout -------------------------------------------

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(Error::shape("avg_pool2d", &s, &[k, k]));
        }
        let (oh, ow) = (s[2] / k, s[3] / k);
        let xd = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1] * oh * ow];
        let norm = 1.0 / (k * k) as f64;
        for plane in 0..s[0] * s[1] {
            let src = &xd[plane * s[2] * s[3]..];
            for y in 0..s[2] {
                for xx in 0..s[3] {
                    out[plane * oh * ow + (y / k) * ow + xx / k] += src[y * s[3] + xx] * norm;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1], oh, ow], out)?,
            Op::AvgPool2d { x, k },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape("upsample_nearest2d", &s, &[factor]));
        }
        let (oh, ow) = (s[2] * factor, s[3] * factor);
        let xd = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1] * oh * ow];
        for plane in 0..s[0] * s[1] {
            let src = &xd[plane * s[2] * s[3]..];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / factor) * s[3] + xx / factor];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1], oh, ow], out)?,
            Op::Upsample2d { x, factor },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Generic axis permutation; `axes[i]` is the source axis of output axis `i`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", &s, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let out = permute_data(self.value(x).data(), &s, axes);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::invalid("concat of zero inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Selects rows of a `[K, D]` table; gradients scatter back into the table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::shape("gather_rows", &s, &[rows.len()]));
        }
        let d = s[1];
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&td[r * d..(r + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Forward value is `value`; the gradient passes to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, value: Tensor) -> Result<Var> {
        if self.shape(x) != value.shape() {
            return Err(Error::shape("straight_through", self.shape(x), value.shape()));
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::StraightThrough(x), rg))
    }

    // ---- reductions ----------------------------------------------------

    /// Mean squared error, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let n = ad.len().max(1) as f64;
        let v = ad.iter().zip(bd).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    // ---- backward ------------------------------------------------------

    /// Populates gradients of the scalar `loss` for every node that needs one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("called twice without reset_grads"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward("loss must be a scalar"));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // Take the op out so `self` can be borrowed mutably for accumulation.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = if self.rg(*a) {
                    g.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect()
                } else {
                    Vec::new()
                };
                let gb: Vec<f64> = if self.rg(*b) {
                    g.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect()
                } else {
                    Vec::new()
                };
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Scale(a, s) => self.accumulate(*a, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) => self.accumulate(*a, g.to_vec()),
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(*a, d);
            }
            Op::Silu(a) => {
                let d = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(*a, d);
            }
            Op::Tanh(a) => {
                let d = g
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(*a, d);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        MatRef::new(g, m, n),
                        MatRef::new(self.value(*b).data(), k, n).t(),
                        &mut ga,
                        false,
                    );
                    self.accumulate(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        MatRef::new(self.value(*a).data(), m, k).t(),
                        MatRef::new(g, m, n),
                        &mut gb,
                        false,
                    );
                    self.accumulate(*b, gb);
                }
            }
            Op::AddBias(x, bias) => {
                let n = self.shape(*bias)[0];
                if self.rg(*bias) {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(*bias, gb);
                }
                self.accumulate(*x, g.to_vec());
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => self.conv2d_backward(*x, *w, *b, geom, cols, g),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => self.group_norm_backward(*x, *gamma, *beta, *groups, xhat, inv_std, g),
            Op::Film { x, scale, shift } => {
                let s = self.shape(*x).to_vec();
                let inner: usize = s[2..].iter().product();
                let sc = self.value(*scale).data().to_vec();
                let xd = self.value(*x).data();
                let mut gs = vec![0.0; sc.len()];
                let mut gsh = vec![0.0; sc.len()];
                let mut gx = vec![0.0; g.len()];
                for (c, (gc, xc)) in g.chunks(inner).zip(xd.chunks(inner)).enumerate() {
                    for ((gv, xv), o) in gc.iter().zip(xc).zip(&mut gx[c * inner..(c + 1) * inner]) {
                        gs[c] += gv * xv;
                        gsh[c] += gv;
                        *o = gv * sc[c];
                    }
                }
                self.accumulate(*x, gx);
                self.accumulate(*scale, gs);
                self.accumulate(*shift, gsh);
            }
            Op::AvgPool2d { x, k } => {
                let s = self.shape(*x).to_vec();
                let (oh, ow) = (s[2] / k, s[3] / k);
                let norm = 1.0 / (k * k) as f64;
                let mut gx = vec![0.0; s.iter().product()];
                for plane in 0..s[0] * s[1] {
                    for y in 0..s[2] {
                        for xx in 0..s[3] {
                            gx[plane * s[2] * s[3] + y * s[3] + xx] =
                                g[plane * oh * ow + (y / k) * ow + xx / k] * norm;
                        }
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::Upsample2d { x, factor } => {
                let s = self.shape(*x).to_vec();
                let (oh, ow) = (s[2] * factor, s[3] * factor);
                let mut gx = vec![0.0; s.iter().product()];
                for plane in 0..s[0] * s[1] {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[plane * s[2] * s[3] + (y / factor) * s[3] + xx / factor] +=
                                g[plane * oh * ow + y * ow + xx];
                        }
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::Reshape(x) | Op::StraightThrough(x) => self.accumulate(*x, g.to_vec()),
            Op::Permute { x, axes } => {
                let out_shape: Vec<usize> = self.nodes[i].value.shape().to_vec();
                let mut inverse = vec![0; axes.len()];
                for (o, &a) in axes.iter().enumerate() {
                    inverse[a] = o;
                }
                let gx = permute_data(g, &out_shape, &inverse);
                self.accumulate(*x, gx);
            }
            Op::Concat { xs, axis } => {
                let s = self.nodes[i].value.shape().to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let lens: Vec<usize> = xs.iter().map(|&v| self.shape(v)[*axis] * inner).collect();
                let row: usize = lens.iter().sum();
                for (j, &v) in xs.iter().enumerate() {
                    if !self.rg(v) {
                        continue;
                    }
                    let off: usize = lens[..j].iter().sum();
                    let mut gx = Vec::with_capacity(outer * lens[j]);
                    for o in 0..outer {
                        gx.extend_from_slice(&g[o * row + off..o * row + off + lens[j]]);
                    }
                    self.accumulate(v, gx);
                }
            }
            Op::GatherRows { table, rows } => {
                let s = self.shape(*table).to_vec();
                let d = s[1];
                let mut gt = vec![0.0; s[0] * d];
                for (gi, &r) in g.chunks(d).zip(rows.iter()) {
                    gt[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(gi)
                        .for_each(|(a, b)| *a += b);
                }
                self.accumulate(*table, gt);
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let c = 2.0 * g[0] / ad.len().max(1) as f64;
                let diff: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| c * (x - y)).collect();
                if self.rg(*b) {
                    self.accumulate(*b, diff.iter().map(|v| -v).collect());
                }
                self.accumulate(*a, diff);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(*x, vec![g[0] / n.max(1) as f64; n]);
            }
        }
        self.nodes[i].op = op;
    }

    fn conv2d_backward(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: &[f64],
        g: &[f64],
    ) {
        let (patch, ohw) = (geom.patch(), geom.out_hw());
        let per_out = geom.out_c * ohw;
        if let Some(b) = b {
            if self.rg(b) {
                let mut gb = vec![0.0; geom.out_c];
                for (i, chunk) in g.chunks(ohw).enumerate() {
                    gb[i % geom.out_c] += chunk.iter().sum::<f64>();
                }
                self.accumulate(b, gb);
            }
        }
        if self.rg(w) {
            let mut gw = vec![0.0; geom.out_c * patch];
            for bi in 0..geom.batch {
                gemm(
                    MatRef::new(&g[bi * per_out..(bi + 1) * per_out], geom.out_c, ohw),
                    MatRef::new(&cols[bi * patch * ohw..(bi + 1) * patch * ohw], patch, ohw).t(),
                    &mut gw,
                    true,
                );
            }
            self.accumulate(w, gw);
        }
        if self.rg(x) {
            let per_in = geom.in_c * geom.in_h * geom.in_w;
            let mut gx = vec![0.0; geom.batch * per_in];
            let mut dcols = vec![0.0; patch * ohw];
            let wd = self.value(w).data();
            for bi in 0..geom.batch {
                gemm(
                    MatRef::new(wd, geom.out_c, patch).t(),
                    MatRef::new(&g[bi * per_out..(bi + 1) * per_out], geom.out_c, ohw),
                    &mut dcols,
                    false,
                );
                col2im(geom, &dcols, &mut gx[bi * per_in..(bi + 1) * per_in]);
            }
            self.accumulate(x, gx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        groups: usize,
        xhat: &[f64],
        inv_std: &[f64],
        g: &[f64],
    ) {
        let s = self.shape(x).to_vec();
        let (c, hw) = (s[1], s[2] * s[3]);
        let gd = gamma.map(|v| self.value(v).data().to_vec());
        if let Some(gm) = gamma {
            let mut gg = vec![0.0; c];
            for (i, (gc, xc)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                gg[i % c] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
            }
            self.accumulate(gm, gg);
        }
        if let Some(bt) = beta {
            let mut gb = vec![0.0; c];
            for (i, gc) in g.chunks(hw).enumerate() {
                gb[i % c] += gc.iter().sum::<f64>();
            }
            self.accumulate(bt, gb);
        }
        if self.rg(x) {
            let mut dxhat = g.to_vec();
            if let Some(gd) = &gd {
                for (i, chunk) in dxhat.chunks_mut(hw).enumerate() {
                    let gm = gd[i % c];
                    chunk.iter_mut().for_each(|v| *v *= gm);
                }
            }
            let group_len = (c / groups) * hw;
            let n = group_len as f64;
            let mut gx = vec![0.0; g.len()];
            for gi in 0..inv_std.len() {
                let range = gi * group_len..(gi + 1) * group_len;
                let dh = &dxhat[range.clone()];
                let xh = &xhat[range.clone()];
                let sum_d: f64 = dh.iter().sum();
                let sum_dx: f64 = dh.iter().zip(xh).map(|(a, b)| a * b).sum();
                let inv = inv_std[gi];
                for ((o, d), h) in gx[range].iter_mut().zip(dh).zip(xh) {
                    *o = inv / n * (n * d - sum_d - h * sum_dx);
                }
            }
            self.accumulate(x, gx);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn im2col(geom: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let ohw = geom.out_hw();
    for c in 0..geom.in_c {
        let plane = &x[c * geom.in_h * geom.in_w..(c + 1) * geom.in_h * geom.in_w];
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = ((c * geom.kh + ki) * geom.kw + kj) * ohw;
                for oy in 0..geom.out_h {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    let dst = &mut cols[row + oy * geom.out_w..row + (oy + 1) * geom.out_w];
                    if iy < 0 || iy >= geom.in_h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * geom.in_w..(iy as usize + 1) * geom.in_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        *d = if ix < 0 || ix >= geom.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(geom: &ConvGeom, cols: &[f64], x: &mut [f64]) {
    let ohw = geom.out_hw();
    for c in 0..geom.in_c {
        let plane = &mut x[c * geom.in_h * geom.in_w..(c + 1) * geom.in_h * geom.in_w];
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = ((c * geom.kh + ki) * geom.kw + kj) * ohw;
                for oy in 0..geom.out_h {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.in_h as isize {
                        continue;
                    }
                    for ox in 0..geom.out_w {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix >= 0 && ix < geom.in_w as isize {
                            plane[iy as usize * geom.in_w + ix as usize] +=
                                cols[row + oy * geom.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}
