//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] lives for one forward pass. Every op appends a node holding
//! its output value and enough context to run its adjoint; [`Tape::backward`]
//! walks the nodes once in reverse insertion order, which is a valid
//! reverse topological order because inputs always precede their consumers.
//!
//! Broadcasting is limited to the two bias-add ops.

use std::sync::Arc;

use crate::error::{dim_err, usage_err, CtsError, Result};
use crate::kernels::{self, ConvGeom, ResizePlan};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse row recombination: output row `i` is `Σ w · input[j]` over
/// `rows[i]`. Covers gathers, scatters, patch extraction and fixed
/// averaging in one differentiable op.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowMix {
    pub in_rows: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    pub fn gather(in_rows: usize, index: &[usize]) -> Self {
        Self {
            in_rows,
            rows: index.iter().map(|&j| vec![(j, 1.0)]).collect(),
        }
    }

    pub fn out_rows(&self) -> usize {
        self.rows.len()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Resize {
        x: Var,
        plan: Arc<ResizePlan>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    RowMix {
        x: Var,
        mix: Arc<RowMix>,
        width: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Copies `t` onto the tape; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(dim_err!("constant of shape {shape:?} given {} values", value.len()));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, false))
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(dim_err!("{what}: expected a matrix, got shape {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul lhs")?;
        let (k2, n) = self.matrix(b, "matmul rhs")?;
        if k != k2 {
            return Err(dim_err!("matmul inner dimensions differ: [{m},{k}] x [{k2},{n}]"));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix(a, "transpose")?;
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(dim_err!("cannot reshape {:?} to {shape:?}", self.shape(a)));
        }
        let value = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(shape, value, Op::Scale(a, s), ng)
    }

    /// `x[..., n] + b[n]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(b) != [n] {
            return Err(dim_err!(
                "row bias {:?} does not match last dim of {:?}",
                self.shape(b),
                self.shape(x)
            ));
        }
        let bias = self.value(b);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % n])
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(shape, value, Op::AddRowBias(x, b), ng))
    }

    /// `x[C, ...] + b[C]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).first().unwrap_or(&1);
        if self.shape(b) != [c] {
            return Err(dim_err!(
                "channel bias {:?} does not match first dim of {:?}",
                self.shape(b),
                self.shape(x)
            ));
        }
        let plane = numel(self.shape(x)) / c.max(1);
        let bias = self.value(b);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i / plane])
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(shape, value, Op::AddChannelBias(x, b), ng))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax axis {axis} out of range for {shape:?}"));
        }
        let outer = numel(&shape[..axis]);
        let n = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| xv[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..n {
                    let e = (xv[at(k)] - max).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..n {
                    out[at(k)] /= sum;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Softmax { x, outer, n, inner }, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(shape, value, Op::Gelu(x), ng)
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(dim_err!(
                "layer_norm affine shapes {:?}/{:?} do not match width {n}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / n.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Cross-correlation of `x: [C_in,H,W]` with `w: [C_out,C_in,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (c_in, h, wd) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(dim_err!("conv2d input must be [C,H,W], got {s:?}")),
        };
        let (c_out, wc_in, kh, kw) = match *self.shape(w) {
            [o, i, kh, kw] => (o, i, kh, kw),
            ref s => return Err(dim_err!("conv2d kernel must be [C_out,C_in,kh,kw], got {s:?}")),
        };
        if wc_in != c_in {
            return Err(dim_err!("conv2d kernel expects {wc_in} input channels, input has {c_in}"));
        }
        let geom = ConvGeom::new(c_in, h, wd, kh, kw, stride, padding).ok_or_else(|| {
            dim_err!("conv2d: {kh}x{kw} kernel, stride {stride}, padding {padding} invalid for {h}x{wd}")
        })?;
        let cols = kernels::im2col(self.value(x), &geom);
        let mut out = vec![0.0; c_out * geom.out_len()];
        kernels::gemm(
            c_out,
            geom.patch_len(),
            geom.out_len(),
            self.value(w),
            false,
            &cols,
            false,
            &mut out,
            0.0,
        );
        let ng = self.ng(x) || self.ng(w);
        let shape = vec![c_out, geom.out_h, geom.out_w];
        Ok(self.push(shape, out, Op::Conv2d { x, w, geom, cols }, ng))
    }

    /// Bilinear resize of `x: [C,H,W]` with half-pixel centers.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = match *self.shape(x) {
            [c, h, w] => (c, h, w),
            ref s => return Err(dim_err!("bilinear_resize input must be [C,H,W], got {s:?}")),
        };
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(dim_err!("bilinear_resize {h}x{w} -> {out_h}x{out_w}: sizes must be >= 1"));
        }
        let plan = Arc::new(ResizePlan::new(c, h, w, out_h, out_w));
        let out = plan.forward(self.value(x));
        let ng = self.ng(x);
        Ok(self.push(vec![c, out_h, out_w], out, Op::Resize { x, plan }, ng))
    }

    /// Mean negative log-likelihood of `targets` under softmax over the
    /// last axis of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        let c = *shape.last().ok_or_else(|| dim_err!("cross_entropy on a scalar"))?;
        let rows = numel(shape) / c.max(1);
        if targets.len() != rows {
            return Err(dim_err!(
                "cross_entropy: {} targets for {rows} prediction rows",
                targets.len()
            ));
        }
        if rows == 0 {
            return Err(dim_err!("cross_entropy over zero rows"));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= c) {
            return Err(CtsError::Input(format!("target class {bad} outside [0,{c})")));
        }
        let xv = self.value(logits);
        let mut probs = vec![0.0; xv.len()];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &xv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[t];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            vec![],
            vec![loss / rows as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.ng(x);
        self.push(vec![], vec![s], Op::Mean(x), ng)
    }

    /// Applies a [`RowMix`] to the rows of `x: [R, D]`.
    pub fn row_mix(&mut self, x: Var, mix: Arc<RowMix>) -> Result<Var> {
        let (r, d) = self.matrix(x, "row_mix")?;
        if r != mix.in_rows {
            return Err(dim_err!("row_mix built for {} rows, input has {r}", mix.in_rows));
        }
        if let Some(bad) = mix.rows.iter().flatten().find(|(j, _)| *j >= r) {
            return Err(dim_err!("row_mix references row {} of {r}", bad.0));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; mix.out_rows() * d];
        for (i, taps) in mix.rows.iter().enumerate() {
            let dst = &mut out[i * d..(i + 1) * d];
            for &(j, w) in taps {
                let src = &xv[j * d..(j + 1) * d];
                dst.iter_mut().zip(src).for_each(|(o, s)| *o += w * s);
            }
        }
        let ng = self.ng(x);
        let shape = vec![mix.out_rows(), d];
        Ok(self.push(shape, out, Op::RowMix { x, mix, width: d }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix(x, "slice_cols")?;
        if start > end || end > c {
            return Err(dim_err!("slice_cols {start}..{end} out of range for {c} columns"));
        }
        let w = end - start;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + end]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![r, w], out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| usage_err!("concat_cols of nothing"))?;
        let (r, _) = self.matrix(first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.matrix(p, "concat_cols")?;
            if pr != r {
                return Err(dim_err!("concat_cols row counts differ: {r} vs {pr}"));
            }
            total += pc;
        }
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let pc = self.shape(p)[1];
            let pv = self.value(p);
            for i in 0..r {
                out[i * total + off..i * total + off + pc].copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Reverse sweep from a scalar `loss`. Every node is visited at most
    /// once; only nodes that depend on a `requires_grad` leaf get gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(usage_err!("loss {loss:?} is not on this tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(usage_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            self.propagate(node, g, lo);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.ng(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if let Some(da) = self.slot(grads, a) {
                    kernels::gemm(m, n, k, g, false, self.value(b), true, da, 1.0);
                }
                if let Some(db) = self.slot(grads, b) {
                    kernels::gemm(k, m, n, self.value(a), true, g, false, db, 1.0);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                if let Some(da) = self.slot(grads, a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, g);
                }
            }
            &Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, b) {
                    add_into(db, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, b) {
                    db.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    let bv = self.value(b);
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * bv[i];
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    let av = self.value(a);
                    for (i, d) in db.iter_mut().enumerate() {
                        *d += g[i] * av[i];
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(da) = self.slot(grads, a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
                }
            }
            &Op::AddRowBias(x, b) => {
                if let Some(dx) = self.slot(grads, x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.slot(grads, b) {
                    let n = db.len();
                    for (i, gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                }
            }
            &Op::AddChannelBias(x, b) => {
                if let Some(dx) = self.slot(grads, x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.slot(grads, b) {
                    let plane = g.len() / db.len().max(1);
                    for (c, d) in db.iter_mut().enumerate() {
                        *d += g[c * plane..(c + 1) * plane].iter().sum::<f64>();
                    }
                }
            }
            &Op::Softmax { x, outer, n, inner } => {
                if let Some(dx) = self.slot(grads, x) {
                    let y = &node.value;
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                dx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    let xv = self.value(x);
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d += g[i] * kernels::gelu_grad(xv[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.shape(*gamma)[0];
                let rows = rstd.len();
                if let Some(dgamma) = self.slot(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..n {
                            dgamma[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(dbeta) = self.slot(grads, *beta) {
                    for r in 0..rows {
                        for j in 0..n {
                            dbeta[j] += g[r * n + j];
                        }
                    }
                }
                let gam = self.value(*gamma).to_vec();
                if let Some(dx) = self.slot(grads, *x) {
                    let nf = n as f64;
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..n {
                            let dh = gr[j] * gam[j];
                            dx[r * n + j] += rstd[r] / nf * (nf * dh - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let c_out = self.shape(*w)[0];
                if let Some(dw) = self.slot(grads, *w) {
                    kernels::gemm(
                        c_out,
                        geom.out_len(),
                        geom.patch_len(),
                        g,
                        false,
                        cols,
                        true,
                        dw,
                        1.0,
                    );
                }
                if self.ng(*x) {
                    let mut dcols = vec![0.0; geom.patch_len() * geom.out_len()];
                    kernels::gemm(
                        geom.patch_len(),
                        c_out,
                        geom.out_len(),
                        self.value(*w),
                        true,
                        g,
                        false,
                        &mut dcols,
                        0.0,
                    );
                    let dx = self.slot(grads, *x).expect("checked needs_grad");
                    kernels::col2im(&dcols, geom, dx);
                }
            }
            Op::Resize { x, plan } => {
                if let Some(dx) = self.slot(grads, *x) {
                    plan.backward(g, dx);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(dl) = self.slot(grads, *logits) {
                    let c = probs.len() / targets.len();
                    let s = g[0] / targets.len() as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    let s = g[0] / dx.len().max(1) as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::RowMix { x, mix, width } => {
                let d = *width;
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, taps) in mix.rows.iter().enumerate() {
                        let gi = &g[i * d..(i + 1) * d];
                        for &(j, w) in taps {
                            dx[j * d..(j + 1) * d]
                                .iter_mut()
                                .zip(gi)
                                .for_each(|(o, s)| *o += w * s);
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                let c = self.shape(x)[1];
                let w = node.shape[1];
                if let Some(dx) = self.slot(grads, x) {
                    for i in 0..node.shape[0] {
                        add_into(&mut dx[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let rows = node.shape[0];
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if let Some(dp) = self.slot(grads, p) {
                        for i in 0..rows {
                            add_into(
                                &mut dp[i * pc..(i + 1) * pc],
                                &g[i * total + off..i * total + off + pc],
                            );
                        }
                    }
                    off += pc;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
