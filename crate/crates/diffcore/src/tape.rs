//! Operation tape and reverse-mode replay.

use crate::error::{DiffError, Result};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch-norm evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, the one used for normalization.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

impl BatchStats {
    pub fn unbiased_var(&self) -> Vec<f64> {
        let c = self.count as f64;
        let scale = if self.count > 1 { c / (c - 1.0) } else { 1.0 };
        self.var.iter().map(|v| v * scale).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct ChannelLayout {
    n: usize,
    c: usize,
    s: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    AddScalar { x: Var },
    AddBias { x: Var, bias: Var },
    Relu { x: Var },
    Softmax { x: Var },
    L2Normalize { x: Var, norms: Vec<T>, eps: T },
    Conv2d { x: Var, w: Var, geom: ConvGeom, c_out: usize, batch: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, layout: ChannelLayout, train: bool },
    AvgPool2d { x: Var, k: usize, stride: usize },
    Reshape { x: Var },
    Permute { x: Var, map: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    RowDot { a: Var, b: Var },
    Sum { x: Var },
    Mean { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records forward operations in topological order for reverse-mode replay.
///
/// Leaves that require gradients accumulate `∂loss/∂leaf` across repeated
/// [`Tape::backward`] calls until [`Tape::zero_grads`].
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.iter().map(|x| x.as_f32()).collect())
            .expect("tape nodes have consistent shapes")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_f32(&self, v: Var) -> Option<Vec<f32>> {
        self.grad(v).map(|g| g.iter().map(|x| x.as_f32()).collect())
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.clear();
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.node(i).requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, shape: &[usize], value: Vec<T>, requires_grad: bool) -> Result<Var> {
        if shape.contains(&0) || numel(shape) != value.len() {
            return Err(DiffError::dim(
                "leaf",
                format!("shape {shape:?} with {} values", value.len()),
            ));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Binds a tensor as a gradient-receiving leaf.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t.shape(), t.data().iter().map(|&x| T::from_f32(x)).collect(), true)
    }

    /// Binds a tensor as a constant (no gradient).
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t.shape(), t.data().iter().map(|&x| T::from_f32(x)).collect(), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        self.push("matmul", vec![m, n], out, &[a, b], Op::MatMul { a, b })
    }

    /// `[B,m,k] × [B,k,n]`, or `[B,m,k] × [B,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || DiffError::dim("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                false,
                &vb[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.push("bmm", vec![batch, m, n], out, &[a, b], Op::BatchMatMul { a, b, trans_b })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, out, &[a, b], rec)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let out = self.value(x).iter().map(|&v| v * f).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, &[x], Op::Scale { x, factor: f })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let out = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", shape, out, &[x], Op::AddScalar { x })
    }

    /// Adds a `[C]` bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(DiffError::dim(
                "add_bias",
                format!("x {:?}, bias {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("add_bias", shape, out, &[x, bias], Op::AddBias { x, bias })
    }

    /// `x[M,in] · w[in,out] + bias[out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", shape, out, &[x], Op::Relu { x })
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let l = *self.shape(x).last().unwrap_or(&0);
        if l == 0 {
            return Err(DiffError::dim("softmax", "empty last axis"));
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(l) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += v.as_f64();
            }
            let inv = T::from_f64(1.0 / total);
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, out, &[x], Op::Softmax { x })
    }

    /// Scales each last-axis slice to unit norm; slices with norm below
    /// `eps` are divided by `eps` instead.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 {
            return Err(DiffError::dim("l2_normalize", "empty last axis"));
        }
        let eps_t = T::from_f64(eps);
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_exact_mut(d) {
            let sq: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum();
            let norm = T::from_f64(sq.sqrt());
            let denom = norm.max(eps_t);
            row.iter_mut().for_each(|v| *v = *v / denom);
            norms.push(norm);
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "l2_normalize",
            shape,
            out,
            &[x],
            Op::L2Normalize { x, norms, eps: eps_t },
        )
    }

    /// NCHW convolution without bias; weight is `[c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let bad = |d: &str| DiffError::dim("conv2d", format!("x {sx:?}, w {sw:?}: {d}"));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(bad("rank"));
        }
        if sx[1] != sw[1] {
            return Err(bad("channels"));
        }
        if stride == 0 {
            return Err(bad("stride 0"));
        }
        let (batch, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(bad("kernel larger than padded input"));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (wd + 2 * pad - kw) / stride + 1,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); batch * c_out * cols];
        let mut col = vec![T::zero(); if geom.is_pointwise() { 0 } else { rows * cols }];
        let (vx, vw) = (self.value(x), self.value(w));
        for n in 0..batch {
            let xn = &vx[n * c_in * h * wd..(n + 1) * c_in * h * wd];
            let on = &mut out[n * c_out * cols..(n + 1) * c_out * cols];
            if geom.is_pointwise() {
                kernels::gemm(c_out, rows, cols, vw, false, xn, false, on, false);
            } else {
                kernels::im2col(&geom, xn, &mut col);
                kernels::gemm(c_out, rows, cols, vw, false, &col, false, on, false);
            }
        }
        self.push(
            "conv2d",
            vec![batch, c_out, geom.h_out, geom.w_out],
            out,
            &[x, w],
            Op::Conv2d { x, w, geom, c_out, batch },
        )
    }

    fn channel_layout(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<ChannelLayout> {
        let s = self.shape(x);
        let layout = match s.len() {
            2 => ChannelLayout { n: s[0], c: s[1], s: 1 },
            4 => ChannelLayout { n: s[0], c: s[1], s: s[2] * s[3] },
            _ => return Err(DiffError::dim(op, format!("input rank {}", s.len()))),
        };
        if self.shape(gamma) != [layout.c] || self.shape(beta) != [layout.c] {
            return Err(DiffError::dim(
                op,
                format!(
                    "x {s:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(layout)
    }

    fn affine_channels(&self, lay: ChannelLayout, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[T]) -> (Vec<T>, Vec<T>) {
        let (vx, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); vx.len()];
        let mut out = vec![T::zero(); vx.len()];
        for n in 0..lay.n {
            for c in 0..lay.c {
                let base = (n * lay.c + c) * lay.s;
                let m = T::from_f64(mean[c]);
                for i in base..base + lay.s {
                    let h = (vx[i] - m) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + b[c];
                }
            }
        }
        (xhat, out)
    }

    /// Batch normalization with batch statistics over every axis but the
    /// channel axis (`[N,C]` or `[N,C,H,W]`). Returns the statistics so the
    /// caller can maintain running estimates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let lay = self.channel_layout("batch_norm", x, gamma, beta)?;
        let count = lay.n * lay.s;
        let vx = self.value(x);
        let mut mean = vec![0.0f64; lay.c];
        let mut var = vec![0.0f64; lay.c];
        for n in 0..lay.n {
            for c in 0..lay.c {
                let base = (n * lay.c + c) * lay.s;
                mean[c] += vx[base..base + lay.s].iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for n in 0..lay.n {
            for c in 0..lay.c {
                let base = (n * lay.c + c) * lay.s;
                var[c] += vx[base..base + lay.s]
                    .iter()
                    .map(|v| (v.as_f64() - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let (xhat, out) = self.affine_channels(lay, x, gamma, beta, &mean, &inv_std);
        let shape = self.shape(x).to_vec();
        let y = self.push(
            "batch_norm",
            shape,
            out,
            &[x, gamma, beta],
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, layout: lay, train: true },
        )?;
        Ok((y, BatchStats { mean, var, count }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[f32], running_var: &[f32], eps: f64) -> Result<Var> {
        let lay = self.channel_layout("batch_norm", x, gamma, beta)?;
        if running_mean.len() != lay.c || running_var.len() != lay.c {
            return Err(DiffError::dim("batch_norm", "running statistics length"));
        }
        let mean: Vec<f64> = running_mean.iter().map(|&m| m as f64).collect();
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::from_f64(1.0 / (v as f64 + eps).sqrt()))
            .collect();
        let (xhat, out) = self.affine_channels(lay, x, gamma, beta, &mean, &inv_std);
        let shape = self.shape(x).to_vec();
        self.push(
            "batch_norm",
            shape,
            out,
            &[x, gamma, beta],
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, layout: lay, train: false },
        )
    }

    /// Average pooling over `k×k` windows of an NCHW input, no padding.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || stride == 0 || s[2] < k || s[3] < k {
            return Err(DiffError::dim("avg_pool2d", format!("{s:?}, k={k}, stride={stride}")));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let vx = self.value(x);
        let inv = 1.0 / (k * k) as f64;
        let mut out = Vec::with_capacity(nc * ho * wo);
        for p in 0..nc {
            let plane = &vx[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f64;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += plane[(oy * stride + dy) * w + ox * stride + dx].as_f64();
                        }
                    }
                    out.push(T::from_f64(acc * inv));
                }
            }
        }
        self.push("avg_pool2d", vec![s[0], s[1], ho, wo], out, &[x], Op::AvgPool2d { x, k, stride })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(DiffError::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), out, &[x], Op::Reshape { x })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(DiffError::dim("permute", format!("{s:?} by {perm:?}")));
        }
        let map = kernels::permute_map(&s, perm);
        let vx = self.value(x);
        let out = map.iter().map(|&i| vx[i]).collect();
        let shape = perm.iter().map(|&p| s[p]).collect();
        self.push("permute", shape, out, &[x], Op::Permute { x, map })
    }

    /// Selects rows of a `[R,D]` matrix; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(DiffError::dim(
                "gather_rows",
                format!("{s:?} with {} rows", rows.len()),
            ));
        }
        let d = s[1];
        let vx = self.value(x);
        let out = rows
            .iter()
            .flat_map(|&r| vx[r * d..(r + 1) * d].iter().copied())
            .collect();
        self.push(
            "gather_rows",
            vec![rows.len(), d],
            out,
            &[x],
            Op::GatherRows { x, rows: rows.to_vec() },
        )
    }

    /// Row-wise inner products of two `[M,D]` matrices, giving `[M]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(DiffError::dim("row_dot", format!("{s:?}")));
        }
        let d = s[1];
        let out = self
            .value(a)
            .chunks_exact(d)
            .zip(self.value(b).chunks_exact(d))
            .map(|(x, y)| T::from_f64(x.iter().zip(y).map(|(p, q)| p.as_f64() * q.as_f64()).sum()))
            .collect();
        self.push("row_dot", vec![s[0]], out, &[a, b], Op::RowDot { a, b })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).iter().map(|v| v.as_f64()).sum();
        self.push("sum", vec![1], vec![T::from_f64(total)], &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let total: f64 = v.iter().map(|v| v.as_f64()).sum();
        let m = total / v.len() as f64;
        self.push("mean", vec![1], vec![T::from_f64(m)], &[x], Op::Mean { x })
    }

    /// Back-propagates from a one-element `loss`, accumulating into every
    /// gradient-requiring leaf reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(DiffError::Contract("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(DiffError::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let Tape { nodes, leaf_grads } = self;
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize(nodes.len(), None);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.as_slice();
        let shp = |v: Var| nodes[v.0].shape.as_slice();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => match &mut leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    none => *none = Some(g),
                },
                &Op::MatMul { a, b } => {
                    let (m, k, n) = (shp(a)[0], shp(a)[1], shp(b)[1]);
                    if rg(a) {
                        let da = slot(&mut grads, a, m * k);
                        kernels::gemm(m, n, k, &g, false, val(b), true, da, true);
                    }
                    if rg(b) {
                        let db = slot(&mut grads, b, k * n);
                        kernels::gemm(k, m, n, val(a), true, &g, false, db, true);
                    }
                }
                &Op::BatchMatMul { a, b, trans_b } => {
                    let (batch, m, k) = (shp(a)[0], shp(a)[1], shp(a)[2]);
                    let n = node.shape[2];
                    if rg(a) {
                        let da = slot(&mut grads, a, batch * m * k);
                        for i in 0..batch {
                            // dA = G·Bᵀ (B is [k,n]) or G·B (B is [n,k])
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &val(b)[i * k * n..(i + 1) * k * n],
                                !trans_b,
                                &mut da[i * m * k..(i + 1) * m * k],
                                true,
                            );
                        }
                    }
                    if rg(b) {
                        let db = slot(&mut grads, b, batch * k * n);
                        for i in 0..batch {
                            let (gi, ai) = (&g[i * m * n..(i + 1) * m * n], &val(a)[i * m * k..(i + 1) * m * k]);
                            let dbi = &mut db[i * k * n..(i + 1) * k * n];
                            if trans_b {
                                // dB[n,k] = Gᵀ·A
                                kernels::gemm(n, m, k, gi, true, ai, false, dbi, true);
                            } else {
                                // dB[k,n] = Aᵀ·G
                                kernels::gemm(k, m, n, ai, true, gi, false, dbi, true);
                            }
                        }
                    }
                }
                &Op::Add { a, b } => {
                    for v in [a, b] {
                        if rg(v) {
                            slot(&mut grads, v, g.len()).iter_mut().zip(&g).for_each(|(d, &x)| *d += x);
                        }
                    }
                }
                &Op::Sub { a, b } => {
                    if rg(a) {
                        slot(&mut grads, a, g.len()).iter_mut().zip(&g).for_each(|(d, &x)| *d += x);
                    }
                    if rg(b) {
                        slot(&mut grads, b, g.len()).iter_mut().zip(&g).for_each(|(d, &x)| *d -= x);
                    }
                }
                &Op::Mul { a, b } => {
                    if rg(a) {
                        let vb = val(b);
                        let da = slot(&mut grads, a, g.len());
                        for ((d, &x), &y) in da.iter_mut().zip(&g).zip(vb) {
                            *d += x * y;
                        }
                    }
                    if rg(b) {
                        let va = val(a);
                        let db = slot(&mut grads, b, g.len());
                        for ((d, &x), &y) in db.iter_mut().zip(&g).zip(va) {
                            *d += x * y;
                        }
                    }
                }
                &Op::Scale { x, factor } => {
                    let dx = slot(&mut grads, x, g.len());
                    dx.iter_mut().zip(&g).for_each(|(d, &v)| *d += v * factor);
                }
                &Op::AddScalar { x } | &Op::Reshape { x } => {
                    let dx = slot(&mut grads, x, g.len());
                    dx.iter_mut().zip(&g).for_each(|(d, &v)| *d += v);
                }
                &Op::AddBias { x, bias } => {
                    let c = shp(bias)[0];
                    if rg(x) {
                        slot(&mut grads, x, g.len()).iter_mut().zip(&g).for_each(|(d, &v)| *d += v);
                    }
                    if rg(bias) {
                        let mut acc = vec![0.0f64; c];
                        for row in g.chunks_exact(c) {
                            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v.as_f64());
                        }
                        let db = slot(&mut grads, bias, c);
                        db.iter_mut().zip(acc).for_each(|(d, a)| *d += T::from_f64(a));
                    }
                }
                &Op::Relu { x } => {
                    let vx = val(x);
                    let dx = slot(&mut grads, x, g.len());
                    for ((d, &gv), &xv) in dx.iter_mut().zip(&g).zip(vx) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                }
                &Op::Softmax { x } => {
                    let l = node.shape[node.shape.len() - 1];
                    let y = &node.value;
                    let dx = slot(&mut grads, x, g.len());
                    for ((drow, grow), yrow) in dx.chunks_exact_mut(l).zip(g.chunks_exact(l)).zip(y.chunks_exact(l)) {
                        let dot = T::from_f64(grow.iter().zip(yrow).map(|(a, b)| a.as_f64() * b.as_f64()).sum());
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
                Op::L2Normalize { x, norms, eps } => {
                    let d = node.shape[node.shape.len() - 1];
                    let y = &node.value;
                    let dx = slot(&mut grads, *x, g.len());
                    for (((drow, grow), yrow), &norm) in dx
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(y.chunks_exact(d))
                        .zip(norms)
                    {
                        if norm >= *eps {
                            let dot = T::from_f64(grow.iter().zip(yrow).map(|(a, b)| a.as_f64() * b.as_f64()).sum());
                            for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                                *dv += (gv - yv * dot) / norm;
                            }
                        } else {
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv += gv / *eps;
                            }
                        }
                    }
                }
                &Op::Conv2d { x, w, geom, c_out, batch } => {
                    let (rows, cols) = (geom.col_rows(), geom.col_cols());
                    let img = geom.c_in * geom.h * geom.w;
                    let vx = val(x);
                    let mut col = vec![T::zero(); rows * cols];
                    if rg(w) {
                        let dw = slot(&mut grads, w, c_out * rows);
                        for n in 0..batch {
                            let gn = &g[n * c_out * cols..(n + 1) * c_out * cols];
                            let xn = &vx[n * img..(n + 1) * img];
                            if geom.is_pointwise() {
                                kernels::gemm(c_out, cols, rows, gn, false, xn, true, dw, true);
                            } else {
                                kernels::im2col(&geom, xn, &mut col);
                                kernels::gemm(c_out, cols, rows, gn, false, &col, true, dw, true);
                            }
                        }
                    }
                    if rg(x) {
                        let vw = val(w);
                        let dx = slot(&mut grads, x, batch * img);
                        for n in 0..batch {
                            let gn = &g[n * c_out * cols..(n + 1) * c_out * cols];
                            let dxn = &mut dx[n * img..(n + 1) * img];
                            if geom.is_pointwise() {
                                kernels::gemm(rows, c_out, cols, vw, true, gn, false, dxn, true);
                            } else {
                                kernels::gemm(rows, c_out, cols, vw, true, gn, false, &mut col, false);
                                kernels::col2im_add(&geom, &col, dxn);
                            }
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, layout, train } => {
                    let lay = *layout;
                    let count = (lay.n * lay.s) as f64;
                    let mut sum_dy = vec![0.0f64; lay.c];
                    let mut sum_dy_xhat = vec![0.0f64; lay.c];
                    for n in 0..lay.n {
                        for c in 0..lay.c {
                            let base = (n * lay.c + c) * lay.s;
                            for i in base..base + lay.s {
                                sum_dy[c] += g[i].as_f64();
                                sum_dy_xhat[c] += g[i].as_f64() * xhat[i].as_f64();
                            }
                        }
                    }
                    if rg(*x) {
                        let gam = val(*gamma).to_vec();
                        let dx = slot(&mut grads, *x, g.len());
                        for n in 0..lay.n {
                            for c in 0..lay.c {
                                let base = (n * lay.c + c) * lay.s;
                                let k = gam[c] * inv_std[c];
                                if *train {
                                    let mean_dy = T::from_f64(sum_dy[c] / count);
                                    let mean_dy_xhat = T::from_f64(sum_dy_xhat[c] / count);
                                    for i in base..base + lay.s {
                                        dx[i] += k * (g[i] - mean_dy - xhat[i] * mean_dy_xhat);
                                    }
                                } else {
                                    for i in base..base + lay.s {
                                        dx[i] += k * g[i];
                                    }
                                }
                            }
                        }
                    }
                    if rg(*gamma) {
                        let dg = slot(&mut grads, *gamma, lay.c);
                        dg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, &v)| *d += T::from_f64(v));
                    }
                    if rg(*beta) {
                        let db = slot(&mut grads, *beta, lay.c);
                        db.iter_mut().zip(&sum_dy).for_each(|(d, &v)| *d += T::from_f64(v));
                    }
                }
                &Op::AvgPool2d { x, k, stride } => {
                    let s = shp(x);
                    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                    let (ho, wo) = (node.shape[2], node.shape[3]);
                    let inv = T::from_f64(1.0 / (k * k) as f64);
                    let dx = slot(&mut grads, x, nc * h * w);
                    for p in 0..nc {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g[(p * ho + oy) * wo + ox] * inv;
                                for dy in 0..k {
                                    for dxx in 0..k {
                                        dx[p * h * w + (oy * stride + dy) * w + ox * stride + dxx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Permute { x, map } => {
                    let dx = slot(&mut grads, *x, g.len());
                    for (&src, &gv) in map.iter().zip(&g) {
                        dx[src] += gv;
                    }
                }
                Op::GatherRows { x, rows } => {
                    let s = shp(*x);
                    let d = s[1];
                    let dx = slot(&mut grads, *x, s[0] * d);
                    for (&r, grow) in rows.iter().zip(g.chunks_exact(d)) {
                        dx[r * d..(r + 1) * d].iter_mut().zip(grow).for_each(|(a, &v)| *a += v);
                    }
                }
                &Op::RowDot { a, b } => {
                    let d = shp(a)[1];
                    for (target, other) in [(a, b), (b, a)] {
                        if rg(target) {
                            let vo = val(other);
                            let dt = slot(&mut grads, target, vo.len());
                            for ((drow, orow), &gv) in dt.chunks_exact_mut(d).zip(vo.chunks_exact(d)).zip(&g) {
                                drow.iter_mut().zip(orow).for_each(|(dv, &o)| *dv += gv * o);
                            }
                        }
                    }
                }
                &Op::Sum { x } => {
                    let n = val(x).len();
                    slot(&mut grads, x, n).iter_mut().for_each(|d| *d += g[0]);
                }
                &Op::Mean { x } => {
                    let n = val(x).len();
                    let gv = g[0] / T::from_f64(n as f64);
                    slot(&mut grads, x, n).iter_mut().for_each(|d| *d += gv);
                }
            }
        }
        Ok(())
    }
}
